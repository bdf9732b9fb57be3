//! The epoch loop: data collection, dynamics fine-tuning, critic update,
//! joint actor/radius update, multiplier ascent, coverage evaluation and the
//! safety-horizon curriculum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_losses, hard_coverage, lambda_update, UncertaintyNet};
use crate::dynamics::{DynModel, Transition};
use crate::envs::{Env, EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, LrSchedule, Mlp, ScheduleKind};
use crate::rl::{actor_loss, critic_loss, new_critic, PolicyNet, RolloutBatch};
use crate::safety_loss::{safety_losses, SafetyWeights};
use crate::seed;

/// Learning-rate schedule shape; the length is the number of training epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSpec {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
}

impl LrSpec {
    pub fn linear(start: f64, end: f64) -> Self {
        Self {
            kind: ScheduleKind::LinearDecay,
            start,
            end,
        }
    }

    pub fn cosine(start: f64, end: f64) -> Self {
        Self {
            kind: ScheduleKind::CosineDecay,
            start,
            end,
        }
    }

    pub fn over(&self, total: u64) -> LrSchedule {
        LrSchedule {
            kind: self.kind,
            lr_start: self.start,
            lr_end: self.end,
            total_steps: total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub env_config: EnvConfig,
    pub seed: u64,
    /// Hidden sizes of the actor, critic and radius networks.
    pub hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub total_interactions: u64,
    pub steps_per_epoch: usize,
    pub initial_horizon: usize,
    /// Forced horizon increment after every this many epochs (0 disables).
    pub increment_period: usize,
    pub rl_weight: f64,
    pub conf_weight: f64,
    pub safety_weight: f64,
    pub safety: SafetyWeights,
    pub alpha: f64,
    pub radius_floor: f64,
    pub temperature: f64,
    pub lambda_init: f64,
    pub lambda_step: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub entropy_coef_start: f64,
    pub entropy_coef_end: f64,
    pub log_std_start: f64,
    pub log_std_end: f64,
    pub critic_lr: LrSpec,
    pub actor_lr: LrSpec,
    pub dynamics_lr: LrSpec,
    pub uncertainty_lr: LrSpec,
    /// Passes over each epoch's data when fine-tuning the dynamics.
    pub dynamics_passes: usize,
    pub pretrain_transitions: usize,
    pub pretrain_passes: usize,
    pub pretrain_lr: LrSpec,
    pub pretrain_holdout: f64,
    pub init_set_size: usize,
    /// Radius scale of the uncertainty network as a multiple of the one-step
    /// error scale measured after pretraining.
    pub radius_headroom: f64,
}

impl TrainConfig {
    pub fn default_for(env: EnvKind) -> Self {
        let (hidden, budget): (Vec<usize>, u64) = match env {
            EnvKind::Cartpole => (vec![12, 12], 1_000_000),
            EnvKind::Lanefollow => (vec![12, 12], 60_000),
            EnvKind::Quad2d | EnvKind::Quad3d => (vec![256, 256, 256], 300_000),
            EnvKind::Quad2dNl => (vec![256, 256], 300_000),
        };
        Self {
            env,
            env_config: EnvConfig::default_for(env),
            seed: 0,
            dynamics_hidden: hidden.clone(),
            hidden,
            total_interactions: budget,
            steps_per_epoch: 4096,
            initial_horizon: 5,
            increment_period: 20,
            rl_weight: 1.0,
            conf_weight: 0.5,
            safety_weight: 1.0,
            safety: SafetyWeights::default(),
            alpha: 0.1,
            radius_floor: 1e-6,
            temperature: 10.0,
            lambda_init: 0.0,
            lambda_step: 0.01,
            gamma: 0.98,
            gae_lambda: 0.97,
            clip: 0.2,
            ppo_epochs: 4,
            minibatch: 256,
            entropy_coef_start: 1e-3,
            entropy_coef_end: 0.0,
            log_std_start: -0.5,
            log_std_end: -2.0,
            critic_lr: LrSpec::linear(1e-3, 0.0),
            actor_lr: LrSpec::cosine(8e-4, 4e-5),
            dynamics_lr: LrSpec::linear(8e-4, 0.0),
            uncertainty_lr: LrSpec::cosine(8e-4, 4e-5),
            dynamics_passes: 5,
            pretrain_transitions: 50_000,
            pretrain_passes: 50,
            pretrain_lr: LrSpec::linear(8e-4, 0.0),
            pretrain_holdout: 0.2,
            init_set_size: 64,
            radius_headroom: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps_per_epoch == 0 || self.minibatch == 0 {
            return bad("steps_per_epoch and minibatch must be positive");
        }
        if self.initial_horizon == 0 {
            return bad("initial_horizon must be at least 1");
        }
        if self.init_set_size == 0 {
            return bad("init_set_size must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        let weights = [
            self.rl_weight,
            self.conf_weight,
            self.safety_weight,
            self.safety.max,
            self.safety.improve,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.radius_floor > 0.0 && self.temperature > 0.0 && self.radius_headroom > 0.0) {
            return bad("radius_floor, temperature and radius_headroom must be positive");
        }
        if !(0.0..1.0).contains(&self.pretrain_holdout) {
            return bad("pretrain_holdout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.total_interactions.div_ceil(self.steps_per_epoch as u64) as usize
    }

    /// Interactions collected in epoch `e`; the last epoch takes the remainder.
    pub fn epoch_steps(&self, e: usize) -> usize {
        let used = (e * self.steps_per_epoch) as u64;
        self.total_interactions.saturating_sub(used).min(self.steps_per_epoch as u64) as usize
    }

    fn progress(&self, e: usize) -> f64 {
        e as f64 / self.total_epochs().max(1) as f64
    }

    pub fn entropy_coef(&self, e: usize) -> f64 {
        let f = self.progress(e);
        self.entropy_coef_start + (self.entropy_coef_end - self.entropy_coef_start) * f
    }

    /// Upper bound on the policy's log standard deviation in epoch `e`.
    pub fn log_std_cap(&self, e: usize) -> f64 {
        let f = self.progress(e);
        self.log_std_start + (self.log_std_end - self.log_std_start) * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub policy: AdamState,
    pub log_std: AdamState,
    pub critic: AdamState,
    pub dynamics: AdamState,
    pub uncertainty: AdamState,
}

/// Everything needed to continue or evaluate a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub config: TrainConfig,
    pub policy: PolicyNet,
    pub critic: Mlp,
    pub dynamics: DynModel,
    pub uncertainty: UncertaintyNet,
    pub optim: Optimizers,
    pub lambda: f64,
    /// Current safety horizon.
    pub horizon: usize,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub interactions: u64,
    pub init_states: Vec<Vec<f64>>,
    /// Diagonal of the dynamics loss weight matrix.
    pub dynamics_weights: Vec<f64>,
    /// Per-dimension one-step error scale after pretraining.
    pub error_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub transitions: usize,
    /// Held-out weighted loss before training and after each pass.
    pub holdout_losses: Vec<f64>,
    pub error_scale: Vec<f64>,
}

impl AgentBundle {
    pub fn env(&self) -> Result<Env> {
        Env::with_config(self.config.env, self.config.env_config.clone())
    }

    /// Builds networks, pretrains the dynamics on random-action data and
    /// draws the fixed initial-state set.
    pub fn initialize(config: TrainConfig) -> Result<(Self, PretrainReport)> {
        config.validate()?;
        let env = Env::with_config(config.env, config.env_config.clone())?;
        let (n, m, o) = (env.state_dim(), env.action_dim(), env.obs_dim());
        let mut rng = seed::rng_for(config.seed, &[seed::NETWORK_INIT]);
        let policy = PolicyNet::new(o, m, &config.hidden, config.log_std_start, &mut rng)?;
        let critic = new_critic(o, &config.hidden, &mut rng)?;
        let mut dynamics = DynModel::new(n, m, &config.dynamics_hidden, &mut rng)?;
        let mut uncertainty = UncertaintyNet::new(n, m, &config.hidden, &mut rng)?;
        let mut optim = Optimizers {
            policy: AdamState::new(policy.mean.params().len()),
            log_std: AdamState::new(m),
            critic: AdamState::new(critic.params().len()),
            dynamics: AdamState::new(dynamics.net.params().len()),
            uncertainty: AdamState::new(uncertainty.net.params().len()),
        };
        let (dynamics_weights, report) = pretrain_dynamics(&env, &mut dynamics, &mut optim.dynamics, &config)?;
        uncertainty.input_norm = dynamics.input_norm.clone();
        uncertainty.radius_scale = report.error_scale.iter().map(|e| e * config.radius_headroom).collect();
        let mut init_rng = seed::rng_for(config.seed, &[seed::INIT_SET]);
        let init_states = (0..config.init_set_size).map(|_| env.reset(&mut init_rng).state).collect();
        Ok((
            Self {
                lambda: config.lambda_init,
                horizon: config.initial_horizon,
                epoch: 0,
                interactions: 0,
                error_scale: report.error_scale.clone(),
                config,
                policy,
                critic,
                dynamics,
                uncertainty,
                optim,
                init_states,
                dynamics_weights,
            },
            report,
        ))
    }

    /// A bundle with the right shapes for `config` and placeholder values,
    /// to be filled from a checkpoint.
    pub fn skeleton(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = Env::with_config(config.env, config.env_config.clone())?;
        let (n, m, o) = (env.state_dim(), env.action_dim(), env.obs_dim());
        let mut rng = seed::rng_for(0, &[]);
        let policy = PolicyNet::new(o, m, &config.hidden, config.log_std_start, &mut rng)?;
        let critic = new_critic(o, &config.hidden, &mut rng)?;
        let dynamics = DynModel::zeros(n, m, &config.dynamics_hidden)?;
        let uncertainty = UncertaintyNet::new(n, m, &config.hidden, &mut rng)?;
        Ok(Self {
            optim: Optimizers {
                policy: AdamState::new(policy.mean.params().len()),
                log_std: AdamState::new(m),
                critic: AdamState::new(critic.params().len()),
                dynamics: AdamState::new(dynamics.net.params().len()),
                uncertainty: AdamState::new(uncertainty.net.params().len()),
            },
            lambda: config.lambda_init,
            horizon: config.initial_horizon,
            epoch: 0,
            interactions: 0,
            init_states: vec![vec![0.0; n]; config.init_set_size],
            dynamics_weights: vec![1.0; n],
            error_scale: vec![1.0; n],
            config,
            policy,
            critic,
            dynamics,
            uncertainty,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }
}

/// Uniform random actions until `count` transitions are collected.
fn random_transitions<R: Rng + ?Sized>(env: &Env, count: usize, rng: &mut R) -> Result<Vec<Transition>> {
    let mut data = Vec::with_capacity(count);
    let mut current = env.reset(rng);
    while data.len() < count {
        let action: Vec<f64> = (0..env.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let r = env.step(&current, &action)?;
        data.push(Transition {
            state: current.state.clone(),
            action,
            next_state: r.next_state.state.clone(),
            step: current.step,
        });
        current = if r.terminated || r.truncated {
            env.reset(rng)
        } else {
            r.next_state
        };
    }
    Ok(data)
}

/// 90th percentile of absolute one-step errors per state dimension.
pub fn one_step_error_scale(model: &DynModel, data: &[Transition]) -> Vec<f64> {
    let errors: Vec<Vec<Vec<f64>>> = data
        .iter()
        .map(|t| vec![crate::conformal::abs_errors(&[t.next_state.clone()], &[model.predict_unchecked(&t.state, &t.action)])[0].clone()])
        .collect();
    match crate::conformal::ScoreScale::from_errors(&errors) {
        Ok(s) => s.rho[0].clone(),
        Err(_) => vec![1.0; model.state_dim()],
    }
}

/// Trains `model` on random-action transitions with criticality weights.
/// Returns the weights and a report with held-out losses and error scales.
pub fn pretrain_dynamics(
    env: &Env,
    model: &mut DynModel,
    adam: &mut AdamState,
    config: &TrainConfig,
) -> Result<(Vec<f64>, PretrainReport)> {
    let mut rng = seed::rng_for(config.seed, &[seed::PRETRAIN]);
    let data = random_transitions(env, config.pretrain_transitions, &mut rng)?;
    let samples: Vec<(Vec<f64>, usize)> = data.iter().map(|t| (t.state.clone(), t.step)).collect();
    let weights = if samples.is_empty() {
        env.spec().phi_weights(&[(vec![0.0; env.state_dim()], 0)])?
    } else {
        env.spec().phi_weights(&samples)?
    };
    if data.is_empty() {
        return Ok((
            weights,
            PretrainReport {
                transitions: 0,
                holdout_losses: Vec::new(),
                error_scale: vec![1.0; env.state_dim()],
            },
        ));
    }
    let n_hold = ((data.len() as f64) * config.pretrain_holdout).round() as usize;
    let (holdout, train) = data.split_at(n_hold.min(data.len() - 1));
    model.fit_normalization(train);
    let schedule = config.pretrain_lr.over(config.pretrain_passes as u64);
    let mut losses = vec![model.loss(holdout, &weights)];
    for pass in 0..config.pretrain_passes {
        model.train_pass(train, &weights, config.minibatch, schedule.lr(pass as u64), adam, &mut rng)?;
        losses.push(model.loss(holdout, &weights));
    }
    let scale_data = if holdout.is_empty() { train } else { holdout };
    let error_scale = one_step_error_scale(model, scale_data);
    Ok((
        weights,
        PretrainReport {
            transitions: data.len(),
            holdout_losses: losses,
            error_scale,
        },
    ))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub interactions: u64,
    /// Safety horizon used during this epoch.
    pub horizon: usize,
    /// Dynamics loss on this epoch's data before and after fine-tuning.
    pub dyn_loss_before: f64,
    pub dyn_loss: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub eff_loss: f64,
    pub cov_loss: f64,
    pub conf_loss: f64,
    pub coverage_proxy: f64,
    pub coverage: f64,
    pub safety_max: f64,
    pub safety_improve: f64,
    pub safety_loss: f64,
    pub safety_diverged: bool,
    pub lambda: f64,
    pub episodes: usize,
    pub mean_return: f64,
    pub cost_rate: f64,
}

impl EpochReport {
    pub const COLUMNS: [&'static str; 21] = [
        "epoch",
        "interactions",
        "horizon",
        "dyn_loss_before",
        "dyn_loss",
        "critic_loss",
        "actor_loss",
        "entropy",
        "eff_loss",
        "cov_loss",
        "conf_loss",
        "coverage_proxy",
        "coverage",
        "safety_max",
        "safety_improve",
        "safety_loss",
        "safety_diverged",
        "lambda",
        "episodes",
        "mean_return",
        "cost_rate",
    ];

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    /// Comma-separated values; floats use the shortest round-trip form.
    pub fn csv_row(&self) -> String {
        [
            self.epoch.to_string(),
            self.interactions.to_string(),
            self.horizon.to_string(),
            self.dyn_loss_before.to_string(),
            self.dyn_loss.to_string(),
            self.critic_loss.to_string(),
            self.actor_loss.to_string(),
            self.entropy.to_string(),
            self.eff_loss.to_string(),
            self.cov_loss.to_string(),
            self.conf_loss.to_string(),
            self.coverage_proxy.to_string(),
            self.coverage.to_string(),
            self.safety_max.to_string(),
            self.safety_improve.to_string(),
            self.safety_loss.to_string(),
            (self.safety_diverged as u8).to_string(),
            self.lambda.to_string(),
            self.episodes.to_string(),
            self.mean_return.to_string(),
            self.cost_rate.to_string(),
        ]
        .join(",")
    }
}

/// New safety horizon after an epoch: one more step if the training boxes
/// certified safe with enough coverage, or after every `period` epochs.
pub fn curriculum_update(horizon: usize, report: &EpochReport, alpha: f64, period: usize) -> usize {
    let certified = report.safety_max < 0.0 && report.coverage >= 1.0 - alpha;
    let forced = period > 0 && (report.epoch + 1) % period == 0;
    if certified || forced {
        horizon + 1
    } else {
        horizon
    }
}

struct Collected {
    batch: RolloutBatch,
    data: Vec<Transition>,
    episodes: usize,
    mean_return: f64,
    cost_rate: f64,
}

fn collect<R: Rng + ?Sized>(
    env: &Env,
    bundle: &AgentBundle,
    steps: usize,
    random_actions: bool,
    rng: &mut R,
) -> Result<Collected> {
    let mut batch = RolloutBatch::default();
    let mut data = Vec::with_capacity(steps);
    let mut current = env.reset(rng);
    let mut episode_return = 0.0;
    let mut returns = Vec::new();
    let mut cost = 0.0;
    for n in 0..steps {
        let obs = env.observe(&current.state, current.step);
        let (action, log_prob) = if random_actions {
            let a: Vec<f64> = (0..env.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let lp = bundle.policy.log_prob(&obs, &a);
            (a, lp)
        } else {
            bundle.policy.sample(&obs, rng)
        };
        let applied: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let r = env.step(&current, &applied)?;
        let value = bundle.critic.forward_unchecked(&obs)[0];
        let next_value = bundle.critic.forward_unchecked(&r.observation)[0];
        let end = r.terminated || r.truncated || n + 1 == steps;
        episode_return += r.reward;
        cost += r.cost;
        batch.observations.push(obs);
        batch.actions.push(action);
        batch.log_probs_old.push(log_prob);
        batch.rewards.push(r.reward);
        batch.costs.push(r.cost);
        batch.values.push(value);
        batch.next_values.push(next_value);
        batch.terminated.push(r.terminated);
        batch.episode_end.push(end);
        data.push(Transition {
            state: current.state.clone(),
            action: applied,
            next_state: r.next_state.state.clone(),
            step: current.step,
        });
        if r.terminated || r.truncated {
            returns.push(episode_return);
            episode_return = 0.0;
            current = env.reset(rng);
        } else {
            current = r.next_state;
        }
    }
    let episodes = returns.len();
    let mean_return = if episodes > 0 {
        returns.iter().sum::<f64>() / episodes as f64
    } else {
        episode_return
    };
    Ok(Collected {
        batch,
        data,
        episodes,
        mean_return,
        cost_rate: if steps > 0 { cost / steps as f64 } else { 0.0 },
    })
}

fn minibatches<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn scaled_sum(parts: &[(f64, &[f64])], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (w, g) in parts {
        if *w != 0.0 {
            for (o, x) in out.iter_mut().zip(g.iter()) {
                *o += w * x;
            }
        }
    }
    out
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Runs the next epoch. On error the bundle is restored to its state at the
/// start of the epoch.
pub fn run_epoch(bundle: &mut AgentBundle, env: &Env) -> Result<EpochReport> {
    let snapshot = bundle.clone();
    match epoch_inner(bundle, env) {
        Ok(report) => Ok(report),
        Err(e) => {
            *bundle = snapshot;
            Err(e)
        }
    }
}

fn epoch_inner(bundle: &mut AgentBundle, env: &Env) -> Result<EpochReport> {
    let cfg = bundle.config.clone();
    let e = bundle.epoch;
    let total = cfg.total_epochs() as u64;
    if bundle.finished() {
        return Err(Error::Contract(format!("all {total} epochs already ran")));
    }
    let steps = cfg.epoch_steps(e);
    let mut rng = seed::rng_for(cfg.seed, &[seed::EPOCH, e as u64]);

    // (i) data collection
    let mut collected = collect(env, bundle, steps, e == 0, &mut rng)?;
    collected.batch.compute_advantages(cfg.gamma, cfg.gae_lambda);
    let batch = &collected.batch;
    let data = &collected.data;

    // (ii) dynamics fine-tuning
    let dyn_loss_before = bundle.dynamics.loss(data, &bundle.dynamics_weights);
    let dyn_lr = cfg.dynamics_lr.over(total).lr(e as u64);
    for _ in 0..cfg.dynamics_passes {
        bundle
            .dynamics
            .train_pass(data, &bundle.dynamics_weights, cfg.minibatch, dyn_lr, &mut bundle.optim.dynamics, &mut rng)?;
    }
    let dyn_loss = bundle.dynamics.loss(data, &bundle.dynamics_weights);
    if !dyn_loss.is_finite() {
        return Err(Error::Diverged("dynamics loss is not finite".into()));
    }

    // (iii) critic
    let critic_lr = cfg.critic_lr.over(total).lr(e as u64);
    let mut critic_losses = Vec::new();
    for _ in 0..cfg.ppo_epochs {
        for mb in minibatches(batch.len(), cfg.minibatch, &mut rng) {
            let (loss, grad) = critic_loss(&bundle.critic, batch, &mb);
            adam_step(bundle.critic.params_mut(), &grad, &mut bundle.optim.critic, critic_lr)?;
            critic_losses.push(loss);
        }
    }

    // (iv) joint actor and radius update
    let actor_lr = cfg.actor_lr.over(total).lr(e as u64);
    let unc_lr = cfg.uncertainty_lr.over(total).lr(e as u64);
    let entropy_coef = cfg.entropy_coef(e);
    let log_std_cap = cfg.log_std_cap(e);
    let mut actor_losses = Vec::new();
    let mut entropies = Vec::new();
    for _ in 0..cfg.ppo_epochs {
        for mb in minibatches(batch.len(), cfg.minibatch, &mut rng) {
            let (al, ag) = actor_loss(&bundle.policy, batch, &mb, cfg.clip, entropy_coef);
            let (_, cg) = conformal_losses(
                &bundle.uncertainty,
                &bundle.dynamics,
                data,
                &mb,
                cfg.alpha,
                bundle.lambda,
                cfg.radius_floor,
                cfg.temperature,
            );
            let n_policy = bundle.policy.mean.params().len();
            let n_unc = bundle.uncertainty.net.params().len();
            let (policy_grad, unc_grad) = if cfg.safety_weight != 0.0 {
                let (_, sg) = safety_losses(
                    env,
                    &bundle.policy,
                    &bundle.dynamics,
                    &bundle.uncertainty,
                    &bundle.init_states,
                    bundle.horizon,
                    &cfg.safety,
                )?;
                (
                    scaled_sum(&[(cfg.rl_weight, &ag.mean), (cfg.safety_weight, &sg.policy)], n_policy),
                    scaled_sum(&[(cfg.conf_weight, &cg), (cfg.safety_weight, &sg.uncertainty)], n_unc),
                )
            } else {
                (
                    scaled_sum(&[(cfg.rl_weight, &ag.mean)], n_policy),
                    scaled_sum(&[(cfg.conf_weight, &cg)], n_unc),
                )
            };
            let log_std_grad: Vec<f64> = ag.log_std.iter().map(|g| cfg.rl_weight * g).collect();
            adam_step(bundle.policy.mean.params_mut(), &policy_grad, &mut bundle.optim.policy, actor_lr)?;
            adam_step(&mut bundle.policy.log_std, &log_std_grad, &mut bundle.optim.log_std, actor_lr)?;
            for ls in bundle.policy.log_std.iter_mut() {
                *ls = ls.min(log_std_cap);
            }
            adam_step(bundle.uncertainty.net.params_mut(), &unc_grad, &mut bundle.optim.uncertainty, unc_lr)?;
            actor_losses.push(al.surrogate);
            entropies.push(al.entropy);
        }
    }

    // Losses at the updated parameters.
    let all: Vec<usize> = (0..data.len()).collect();
    let (conf, _) = conformal_losses(
        &bundle.uncertainty,
        &bundle.dynamics,
        data,
        &all,
        cfg.alpha,
        bundle.lambda,
        cfg.radius_floor,
        cfg.temperature,
    );
    let (safety, _) = safety_losses(
        env,
        &bundle.policy,
        &bundle.dynamics,
        &bundle.uncertainty,
        &bundle.init_states,
        bundle.horizon,
        &cfg.safety,
    )?;

    // (v) multiplier ascent, (vi) hard coverage
    let lambda = lambda_update(bundle.lambda, conf.coverage, cfg.lambda_step);
    let coverage = hard_coverage(&bundle.uncertainty, &bundle.dynamics, data);

    let report = EpochReport {
        epoch: e,
        interactions: bundle.interactions + steps as u64,
        horizon: bundle.horizon,
        dyn_loss_before,
        dyn_loss,
        critic_loss: mean(&critic_losses),
        actor_loss: mean(&actor_losses),
        entropy: mean(&entropies),
        eff_loss: conf.efficiency,
        cov_loss: conf.coverage,
        conf_loss: conf.total,
        coverage_proxy: conf.coverage_proxy,
        coverage,
        safety_max: safety.max,
        safety_improve: safety.improve,
        safety_loss: safety.total,
        safety_diverged: safety.diverged,
        lambda,
        episodes: collected.episodes,
        mean_return: collected.mean_return,
        cost_rate: collected.cost_rate,
    };
    bundle.lambda = lambda;
    bundle.horizon = curriculum_update(bundle.horizon, &report, cfg.alpha, cfg.increment_period);
    bundle.epoch += 1;
    bundle.interactions += steps as u64;
    Ok(report)
}

/// Runs the remaining epochs, calling `on_epoch` after each one.
pub fn train(
    bundle: &mut AgentBundle,
    mut on_epoch: impl FnMut(&AgentBundle, &EpochReport) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let env = bundle.env()?;
    let mut reports = Vec::new();
    while !bundle.finished() {
        let report = run_epoch(bundle, &env)?;
        on_epoch(bundle, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(env: EnvKind) -> TrainConfig {
        let mut c = TrainConfig::default_for(env);
        c.hidden = vec![6];
        c.dynamics_hidden = vec![8];
        c.steps_per_epoch = 256;
        c.total_interactions = 600;
        c.minibatch = 64;
        c.ppo_epochs = 2;
        c.dynamics_passes = 2;
        c.pretrain_transitions = 800;
        c.pretrain_passes = 3;
        c.init_set_size = 4;
        c.initial_horizon = 3;
        c.increment_period = 2;
        c
    }

    fn report(epoch: usize, safety_max: f64, coverage: f64) -> EpochReport {
        EpochReport {
            epoch,
            interactions: 0,
            horizon: 5,
            dyn_loss_before: 0.0,
            dyn_loss: 0.0,
            critic_loss: 0.0,
            actor_loss: 0.0,
            entropy: 0.0,
            eff_loss: 0.0,
            cov_loss: 0.0,
            conf_loss: 0.0,
            coverage_proxy: 0.0,
            coverage,
            safety_max,
            safety_improve: 0.0,
            safety_loss: 0.0,
            safety_diverged: false,
            lambda: 0.0,
            episodes: 0,
            mean_return: 0.0,
            cost_rate: 0.0,
        }
    }

    #[test]
    fn curriculum_rules() {
        assert_eq!(curriculum_update(5, &report(3, -0.01, 0.95), 0.1, 20), 6);
        assert_eq!(curriculum_update(5, &report(3, 0.01, 0.95), 0.1, 20), 5);
        assert_eq!(curriculum_update(5, &report(3, -0.01, 0.85), 0.1, 20), 5);
        assert_eq!(curriculum_update(5, &report(19, 0.5, 0.2), 0.1, 20), 6);
        assert_eq!(curriculum_update(5, &report(19, -0.5, 0.99), 0.1, 20), 6);
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = TrainConfig::default_for(EnvKind::Cartpole);
        assert_eq!((c.gamma, c.gae_lambda, c.clip), (0.98, 0.97, 0.2));
        assert_eq!((c.rl_weight, c.conf_weight, c.safety_weight), (1.0, 0.5, 1.0));
        assert_eq!((c.safety.max, c.safety.improve), (0.5, 1.0));
        assert_eq!(c.hidden, vec![12, 12]);
        assert_eq!(c.total_interactions, 1_000_000);
        assert_eq!(TrainConfig::default_for(EnvKind::Quad2dNl).hidden, vec![256, 256]);
        assert_eq!(TrainConfig::default_for(EnvKind::Lanefollow).total_interactions, 60_000);
    }

    #[test]
    fn budget_accounting() {
        let c = tiny_config(EnvKind::Cartpole);
        assert_eq!(c.total_epochs(), 3);
        let total: usize = (0..3).map(|e| c.epoch_steps(e)).sum();
        assert_eq!(total as u64, c.total_interactions);
        assert_eq!(c.epoch_steps(2), 88);
    }

    #[test]
    fn zero_pretraining_leaves_model_unchanged() {
        let mut c = tiny_config(EnvKind::Cartpole);
        c.pretrain_transitions = 0;
        let env = Env::new(EnvKind::Cartpole);
        let mut rng = seed::rng_for(0, &[]);
        let mut model = DynModel::new(4, 1, &[4], &mut rng).unwrap();
        let before = model.clone();
        let mut adam = AdamState::new(model.net.params().len());
        let (_, r) = pretrain_dynamics(&env, &mut model, &mut adam, &c).unwrap();
        assert_eq!(model, before);
        assert!(r.error_scale.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn short_run_is_reproducible_and_consistent() {
        let c = tiny_config(EnvKind::Cartpole);
        let run = || {
            let (mut b, _) = AgentBundle::initialize(c.clone()).unwrap();
            let reports = train(&mut b, |_, _| Ok(())).unwrap();
            (b, reports)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(a.interactions, c.total_interactions);
        assert_eq!(ra.len(), 3);
        for w in ra.windows(2) {
            assert!(w[1].horizon >= w[0].horizon);
        }
        assert!(ra.iter().all(|r| r.horizon <= c.initial_horizon + r.epoch));
        assert!(a.policy.log_std.iter().all(|l| *l <= c.log_std_cap(2)));
    }

    #[test]
    fn failed_epoch_rolls_back() {
        let c = tiny_config(EnvKind::Cartpole);
        let (mut b, _) = AgentBundle::initialize(c).unwrap();
        let env = b.env().unwrap();
        // A non-finite network parameter makes the collected values NaN and
        // the critic step reject its gradient.
        b.critic.params_mut()[0] = f64::NAN;
        let before = b.clone();
        assert!(run_epoch(&mut b, &env).is_err());
        assert!(b.critic.params()[0].is_nan());
        b.critic.params_mut()[0] = 0.0;
        let mut expected = before;
        expected.critic.params_mut()[0] = 0.0;
        assert_eq!(b, expected);
    }

    #[test]
    fn all_environments_run_an_epoch() {
        for kind in EnvKind::ALL {
            let mut c = tiny_config(kind);
            c.total_interactions = 128;
            c.steps_per_epoch = 128;
            let (mut b, _) = AgentBundle::initialize(c).unwrap();
            let reports = train(&mut b, |_, _| Ok(())).unwrap();
            assert_eq!(reports.len(), 1, "{kind}");
            assert!(reports[0].dyn_loss.is_finite());
        }
    }
}
