//! Post-training safety verification.
//!
//! Calibration trajectories pair a true rollout with a surrogate rollout from
//! the same initial state. Conformal radii around the surrogate rollout give
//! per-step boxes; an initial state counts as verified when every box up to
//! the horizon clears the unsafe set. The verified fraction on fresh initial
//! states feeds a Hoeffding lower bound on trajectory safety.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate_ts, calibrate_union, optimize_ts_weights, scores_from_errors, CalibrationMode, ConformalCalibration,
    ScoreScale, WeightSearch,
};
use crate::dynamics::{DynModel, DIVERGENCE_NORM};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::rl::PolicyNet;
use crate::safety::SafetySpec;
use crate::seed;

/// The system being certified.
pub trait TrueSystem {
    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Next state after `action` at `step`; non-finite values are allowed and
    /// score as infinitely wrong.
    fn next_state(&self, state: &[f64], action: &[f64], step: usize, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Deterministic one-step predictor.
pub trait Surrogate {
    fn predict(&self, state: &[f64], action: &[f64]) -> Vec<f64>;
}

/// Deterministic state-feedback controller.
pub trait Controller {
    fn act(&self, state: &[f64], step: usize) -> Vec<f64>;
}

impl TrueSystem for Env {
    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.reset(rng).state
    }

    fn next_state(&self, state: &[f64], action: &[f64], _step: usize, _rng: &mut dyn RngCore) -> Vec<f64> {
        let clamped: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        self.transition(state, &clamped)
    }
}

impl Surrogate for DynModel {
    fn predict(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        self.predict_unchecked(state, action)
    }
}

/// The policy mean acting on environment observations.
pub struct PolicyController<'a> {
    pub env: &'a Env,
    pub policy: &'a PolicyNet,
}

impl Controller for PolicyController<'_> {
    fn act(&self, state: &[f64], step: usize) -> Vec<f64> {
        self.policy.act(&self.env.observe(state, step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub alpha: f64,
    pub delta: f64,
    pub k_max: usize,
    /// Trajectories used only to fit the score scales.
    pub n_scale: usize,
    pub n_cal: usize,
    /// Time-series mode: the first `n_opt` calibration trajectories choose
    /// the weights, the rest set the quantile.
    pub n_opt: usize,
    pub n_ver: usize,
    pub modes: Vec<CalibrationMode>,
    pub weight_search: WeightSearch,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            delta: 0.05,
            k_max: 50,
            n_scale: 200,
            n_cal: 1000,
            n_opt: 100,
            n_ver: 2000,
            modes: vec![CalibrationMode::Union, CalibrationMode::Ts],
            weight_search: WeightSearch::default(),
            seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.delta > 0.0 && self.delta < 1.0) {
            return bad("alpha and delta must lie in (0, 1)");
        }
        if self.k_max == 0 || self.n_cal == 0 || self.n_ver == 0 || self.n_scale == 0 {
            return bad("k_max, n_scale, n_cal and n_ver must be positive");
        }
        if self.modes.contains(&CalibrationMode::Ts) && self.n_opt >= self.n_cal {
            return bad("n_opt must leave calibration trajectories for the quantile");
        }
        if self.modes.is_empty() {
            return bad("at least one calibration mode is required");
        }
        Ok(())
    }
}

/// `(V/N − √(ln(2/δ)/(2N)))·(1−α)·(1−δ)`.
pub fn hoeffding_bound(safe: usize, n: usize, delta: f64, alpha: f64) -> Result<f64> {
    if n == 0 || safe > n {
        return Err(Error::Contract(format!("need 0 <= safe <= n and n > 0, got {safe}/{n}")));
    }
    if !(delta > 0.0 && delta < 1.0 && (0.0..1.0).contains(&alpha)) {
        return Err(Error::Contract("delta must lie in (0, 1) and alpha in [0, 1)".into()));
    }
    Ok((safe as f64 / n as f64 - hoeffding_term(n, delta)) * (1.0 - alpha) * (1.0 - delta))
}

pub fn hoeffding_term(n: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Bound reported for horizons the calibration data cannot support.
pub const INFEASIBLE_BOUND: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRow {
    pub k: usize,
    pub mode: CalibrationMode,
    pub feasible: bool,
    pub safe_count: usize,
    pub n: usize,
    pub empirical_safe_fraction: f64,
    pub hoeffding_term: f64,
    pub lower_bound: f64,
    /// Fraction of the paired true rollouts that stayed safe through step `k`.
    pub true_safe_fraction: f64,
}

impl VerificationRow {
    pub const COLUMNS: [&'static str; 9] = [
        "k",
        "mode",
        "feasible",
        "safe_count",
        "n",
        "empirical_safe_fraction",
        "hoeffding_term",
        "lower_bound",
        "true_safe_fraction",
    ];

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.k,
            self.mode.name(),
            self.feasible as u8,
            self.safe_count,
            self.n,
            self.empirical_safe_fraction,
            self.hoeffding_term,
            self.lower_bound,
            self.true_safe_fraction
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub alpha: f64,
    pub delta: f64,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub rows: Vec<VerificationRow>,
    pub calibrations: Vec<ConformalCalibration>,
}

impl VerificationReport {
    pub fn to_csv(&self) -> String {
        let mut out = VerificationRow::csv_header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn row(&self, k: usize, mode: CalibrationMode) -> Option<&VerificationRow> {
        self.rows.iter().find(|r| r.k == k && r.mode == mode)
    }
}

/// Paired rollouts from one initial state over `horizon` steps.
pub struct PairedRollout {
    pub initial: Vec<f64>,
    /// True states at steps `1..=horizon`.
    pub truth: Vec<Vec<f64>>,
    /// Surrogate states at steps `1..=horizon`; `+∞` after divergence.
    pub predicted: Vec<Vec<f64>>,
}

impl PairedRollout {
    pub fn errors(&self) -> Vec<Vec<f64>> {
        crate::conformal::abs_errors(&self.truth, &self.predicted)
    }
}

pub fn paired_rollout(
    system: &dyn TrueSystem,
    surrogate: &dyn Surrogate,
    controller: &dyn Controller,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> PairedRollout {
    let initial = system.sample_initial(rng);
    let mut truth = Vec::with_capacity(horizon);
    let mut s = initial.clone();
    for t in 0..horizon {
        let a = controller.act(&s, t);
        s = system.next_state(&s, &a, t, rng);
        truth.push(s.clone());
    }
    let mut predicted = Vec::with_capacity(horizon);
    let mut s = initial.clone();
    let mut diverged = false;
    for t in 0..horizon {
        if !diverged {
            let a = controller.act(&s, t);
            s = surrogate.predict(&s, &a);
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            diverged = !(norm <= DIVERGENCE_NORM);
        }
        if diverged {
            predicted.push(vec![f64::INFINITY; s.len()]);
        } else {
            predicted.push(s.clone());
        }
    }
    PairedRollout {
        initial,
        truth,
        predicted,
    }
}

fn batch(
    system: &dyn TrueSystem,
    surrogate: &dyn Surrogate,
    controller: &dyn Controller,
    horizon: usize,
    n: usize,
    root: u64,
    split: u64,
) -> Vec<PairedRollout> {
    let mut rng = seed::rng_for(root, &[seed::VERIFY, split]);
    (0..n)
        .map(|_| paired_rollout(system, surrogate, controller, horizon, &mut rng))
        .collect()
}

/// True when `states[..k]` are safe under `spec`, with state `t` at step `t+1`.
fn truly_safe(spec: &SafetySpec, states: &[Vec<f64>], k: usize) -> bool {
    states[..k]
        .iter()
        .enumerate()
        .all(|(t, s)| s.iter().all(|x| x.is_finite()) && spec.is_safe_state(s, t + 1))
}

fn verified(spec: &SafetySpec, predicted: &[Vec<f64>], calibration: &ConformalCalibration) -> bool {
    predicted
        .iter()
        .zip(&calibration.radii)
        .enumerate()
        .all(|(t, (c, r))| c.iter().all(|x| x.is_finite()) && spec.g_box_slices(c, r, t + 1) <= 0.0)
}

/// Calibrates every horizon `1..=k_max` in every requested mode and reports
/// one bound per horizon and mode.
pub fn verify(
    system: &dyn TrueSystem,
    surrogate: &dyn Surrogate,
    controller: &dyn Controller,
    spec: &SafetySpec,
    config: &VerifyConfig,
) -> Result<VerificationReport> {
    config.validate()?;
    let k_max = config.k_max;
    let dims = spec.constrained_dims();
    let scale_set = batch(system, surrogate, controller, k_max, config.n_scale, config.seed, 0);
    let errors: Vec<Vec<Vec<f64>>> = scale_set.iter().map(PairedRollout::errors).collect();
    let scale = ScoreScale::from_errors(&errors)?;

    let cal_set = batch(system, surrogate, controller, k_max, config.n_cal, config.seed, 1);
    let scores: Vec<Vec<f64>> = cal_set
        .iter()
        .map(|p| scores_from_errors(&p.errors(), &scale, &dims))
        .collect();
    let (opt_scores, quantile_scores) = scores.split_at(config.n_opt.min(scores.len()));

    let ver_set = batch(system, surrogate, controller, k_max, config.n_ver, config.seed, 2);
    let n = ver_set.len();
    let term = hoeffding_term(n, config.delta);

    let mut rows = Vec::new();
    let mut calibrations = Vec::new();
    for k in 1..=k_max {
        let scale_k = scale.truncated(k);
        let true_safe = ver_set.iter().filter(|p| truly_safe(spec, &p.truth, k)).count();
        for &mode in &config.modes {
            let calibration = match mode {
                CalibrationMode::Union => calibrate_union(&scores, config.alpha, &scale_k, &dims)?,
                CalibrationMode::Ts => {
                    let mut rng = seed::rng_for(config.seed, &[seed::VERIFY, 3, k as u64]);
                    let w = optimize_ts_weights(opt_scores, k, config.alpha, config.weight_search, &mut rng);
                    calibrate_ts(quantile_scores, &w, config.alpha, &scale_k, &dims)?
                }
            };
            let safe_count = if calibration.feasible {
                ver_set
                    .iter()
                    .filter(|p| verified(spec, &p.predicted[..k], &calibration))
                    .count()
            } else {
                0
            };
            let lower_bound = if calibration.feasible {
                hoeffding_bound(safe_count, n, config.delta, config.alpha)?
            } else {
                INFEASIBLE_BOUND
            };
            rows.push(VerificationRow {
                k,
                mode,
                feasible: calibration.feasible,
                safe_count,
                n,
                empirical_safe_fraction: safe_count as f64 / n as f64,
                hoeffding_term: term,
                lower_bound,
                true_safe_fraction: true_safe as f64 / n as f64,
            });
            calibrations.push(calibration);
        }
    }
    Ok(VerificationReport {
        alpha: config.alpha,
        delta: config.delta,
        seed: config.seed,
        checkpoint: None,
        rows,
        calibrations,
    })
}

/// Verification of a trained policy and dynamics model on an environment.
pub fn verify_policy(env: &Env, policy: &PolicyNet, model: &DynModel, config: &VerifyConfig) -> Result<VerificationReport> {
    let controller = PolicyController { env, policy };
    verify(env, model, &controller, env.spec(), config)
}

/// Monte-Carlo statistics of the deterministic policy on the true environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub horizon: usize,
    pub mean_reward: f64,
    pub reward_stderr: f64,
    pub mean_cost_rate: f64,
    pub cost_rate_stderr: f64,
    /// Fraction of episodes without a violation before the horizon.
    pub violation_free_fraction: f64,
    pub violation_free_stderr: f64,
}

impl EvalStats {
    pub const COLUMNS: [&'static str; 8] = [
        "episodes",
        "horizon",
        "mean_reward",
        "reward_stderr",
        "mean_cost_rate",
        "cost_rate_stderr",
        "violation_free_fraction",
        "violation_free_stderr",
    ];

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episodes,
            self.horizon,
            self.mean_reward,
            self.reward_stderr,
            self.mean_cost_rate,
            self.cost_rate_stderr,
            self.violation_free_fraction,
            self.violation_free_stderr
        )
    }
}

fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `episodes` episodes of at most `horizon` steps with the policy mean.
/// Episodes end early on termination or truncation.
pub fn empirical_eval(env: &Env, policy: &PolicyNet, episodes: usize, horizon: usize, seed_root: u64) -> Result<EvalStats> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::Contract("evaluation needs at least one episode and step".into()));
    }
    let mut rng = seed::rng_for(seed_root, &[seed::EVAL]);
    let mut rewards = Vec::with_capacity(episodes);
    let mut cost_rates = Vec::with_capacity(episodes);
    let mut clean = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut current = env.reset(&mut rng);
        let (mut reward, mut cost, mut steps) = (0.0, 0.0, 0usize);
        while steps < horizon {
            let action = policy.act(&env.observe(&current.state, current.step));
            let r = env.step(&current, &action)?;
            reward += r.reward;
            cost += r.cost;
            steps += 1;
            if r.terminated || r.truncated {
                break;
            }
            current = r.next_state;
        }
        rewards.push(reward);
        cost_rates.push(cost / steps as f64);
        clean.push(if cost == 0.0 { 1.0 } else { 0.0 });
    }
    let (mean_reward, reward_stderr) = mean_stderr(&rewards);
    let (mean_cost_rate, cost_rate_stderr) = mean_stderr(&cost_rates);
    let (violation_free_fraction, violation_free_stderr) = mean_stderr(&clean);
    Ok(EvalStats {
        episodes,
        horizon,
        mean_reward,
        reward_stderr,
        mean_cost_rate,
        cost_rate_stderr,
        violation_free_fraction,
        violation_free_stderr,
    })
}
