//! Gaussian actor, value critic, GAE and clipped-surrogate PPO losses.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Activation, Mlp, Tape, Var};

/// Diagonal Gaussian policy around a tanh-bounded mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Ok(Self {
            mean: Mlp::new(&sizes, Activation::Tanh, Activation::Tanh, rng)?,
            log_std: vec![log_std; action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Deterministic action, the mean.
    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        self.mean.forward_unchecked(obs)
    }

    pub fn mean_tape(&self, tape: &mut Tape, params: Var, obs: Var) -> Var {
        self.mean.forward_tape(tape, params, obs)
    }

    /// Unclamped Gaussian sample and its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let mean = self.act(obs);
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let lp = gaussian_log_prob(&mean, &self.log_std, &action);
        (action, lp)
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> f64 {
        gaussian_log_prob(&self.act(obs), &self.log_std, action)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| 0.5 + 0.5 * (2.0 * PI).ln() + ls).sum()
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// On-policy data of one epoch, flattened across episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub observations: Vec<Vec<f64>>,
    /// Actions as sampled, before clamping to the action box.
    pub actions: Vec<Vec<f64>>,
    pub log_probs_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the successor observation (ignored when `terminated`).
    pub next_values: Vec<f64>,
    pub terminated: Vec<bool>,
    /// True on the last transition of an episode or collection segment.
    pub episode_end: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// GAE(γ, λ) advantages and value targets. Terminal transitions bootstrap
/// with zero; episode ends that are not terminal bootstrap with `next_values`.
#[allow(clippy::too_many_arguments)]
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if episode_end[t] {
            running = 0.0;
        }
        let bootstrap = if terminated[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * bootstrap - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize(values: &mut [f64]) {
    let n = values.len();
    if n == 0 {
        return;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

impl RolloutBatch {
    /// Fills `advantages` (normalised) and `returns`.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let (mut adv, ret) = gae(
            &self.rewards,
            &self.values,
            &self.next_values,
            &self.terminated,
            &self.episode_end,
            gamma,
            lambda,
        );
        normalize(&mut adv);
        self.advantages = adv;
        self.returns = ret;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGradient {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorLoss {
    /// Clipped surrogate loss `−mean(min(r A, clip(r) A))`.
    pub surrogate: f64,
    pub entropy: f64,
    /// `surrogate − entropy_coef · entropy`, the minimised quantity.
    pub total: f64,
}

/// Clipped-surrogate actor loss with entropy bonus over `batch`.
pub fn actor_loss(
    policy: &PolicyNet,
    data: &RolloutBatch,
    batch: &[usize],
    clip: f64,
    entropy_coef: f64,
) -> (ActorLoss, ActorGradient) {
    let n = batch.len().max(1) as f64;
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    let mut grad_mean = vec![0.0; policy.mean.params().len()];
    let mut grad_log_std = vec![0.0; policy.action_dim()];
    let mut surrogate = 0.0;
    for &i in batch {
        let obs = &data.observations[i];
        let action = &data.actions[i];
        let adv = data.advantages[i];
        let trace = policy.mean.forward_trace(obs);
        let mean = trace.output();
        let lp = gaussian_log_prob(mean, &policy.log_std, action);
        let ratio = (lp - data.log_probs_old[i]).exp();
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped * adv;
        surrogate -= unclipped_term.min(clipped_term) / n;
        if unclipped_term <= clipped_term {
            // d(−ratio·A/n)/d ratio, chained through the log-density.
            let g_ratio = -adv / n * ratio;
            let g_mean: Vec<f64> = (0..mean.len())
                .map(|j| g_ratio * (action[j] - mean[j]) / (std[j] * std[j]))
                .collect();
            for j in 0..mean.len() {
                let z = (action[j] - mean[j]) / std[j];
                grad_log_std[j] += g_ratio * (z * z - 1.0);
            }
            policy.mean.backward(&trace, &g_mean, &mut grad_mean);
        }
    }
    let entropy = policy.entropy();
    for g in grad_log_std.iter_mut() {
        *g -= entropy_coef;
    }
    (
        ActorLoss {
            surrogate,
            entropy,
            total: surrogate - entropy_coef * entropy,
        },
        ActorGradient {
            mean: grad_mean,
            log_std: grad_log_std,
        },
    )
}

/// `mean((V(o) − R)²)` and its parameter gradient.
pub fn critic_loss(critic: &Mlp, data: &RolloutBatch, batch: &[usize]) -> (f64, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; critic.params().len()];
    let mut loss = 0.0;
    for &i in batch {
        let trace = critic.forward_trace(&data.observations[i]);
        let r = trace.output()[0] - data.returns[i];
        loss += r * r / n;
        critic.backward(&trace, &[2.0 * r / n], &mut grad);
    }
    (loss, grad)
}

pub fn new_critic<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Mlp> {
    let mut sizes = vec![obs_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    Mlp::new(&sizes, Activation::Tanh, Activation::Linear, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, finite_difference, relative_error, AdamState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_step_td_advantage() {
        let (adv, ret) = gae(&[1.0], &[0.0], &[0.0], &[false], &[true], 0.98, 0.97);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn zero_lambda_gives_td_errors() {
        let r = [1.0, 0.5, -0.2, 2.0];
        let v = [0.3, 0.1, 0.7, -0.4];
        let nv = [0.1, 0.7, -0.4, 0.9];
        let term = [false, false, false, false];
        let end = [false, false, false, true];
        let (adv, _) = gae(&r, &v, &nv, &term, &end, 0.9, 0.0);
        for t in 0..4 {
            assert!((adv[t] - (r[t] + 0.9 * nv[t] - v[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_lambda_gives_reward_to_go() {
        let r = [1.0, 2.0, 3.0, 4.0, 5.0];
        let zeros = [0.0; 5];
        let term = [false, true, false, false, true];
        let end = [false, true, false, false, true];
        let (adv, _) = gae(&r, &zeros, &zeros, &term, &end, 1.0, 1.0);
        assert_eq!(adv, vec![3.0, 2.0, 12.0, 9.0, 5.0]);
    }

    #[test]
    fn truncated_episode_bootstraps() {
        let (adv, _) = gae(&[0.0], &[0.0], &[2.0], &[false], &[true], 0.5, 0.9);
        assert_eq!(adv, vec![1.0]);
    }

    fn toy_batch(policy: &PolicyNet, rng: &mut ChaCha8Rng, n: usize) -> RolloutBatch {
        let mut b = RolloutBatch::default();
        for _ in 0..n {
            let obs = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (a, lp) = policy.sample(&obs, rng);
            b.observations.push(obs);
            b.actions.push(a);
            b.log_probs_old.push(lp + rng.random_range(-0.3..0.3));
            b.advantages.push(rng.random_range(-1.0..1.0));
            b.returns.push(rng.random_range(-2.0..2.0));
        }
        b
    }

    #[test]
    fn on_policy_ratio_gives_negative_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = PolicyNet::new(2, 1, &[4], -0.5, &mut rng).unwrap();
        let mut b = toy_batch(&policy, &mut rng, 64);
        for i in 0..64 {
            b.log_probs_old[i] = policy.log_prob(&b.observations[i], &b.actions[i]);
        }
        normalize(&mut b.advantages);
        let batch: Vec<usize> = (0..64).collect();
        let (l, _) = actor_loss(&policy, &b, &batch, 0.2, 0.0);
        assert!(l.surrogate.abs() < 1e-12);
    }

    #[test]
    fn clip_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = PolicyNet::new(1, 1, &[2], 0.0, &mut rng).unwrap();
        let obs = vec![0.1];
        let action = vec![0.4];
        let lp = policy.log_prob(&obs, &action);
        let b = RolloutBatch {
            observations: vec![obs],
            actions: vec![action],
            log_probs_old: vec![lp - 1.5f64.ln()],
            advantages: vec![2.0],
            ..Default::default()
        };
        let (l, g) = actor_loss(&policy, &b, &[0], 0.2, 0.0);
        assert!((l.surrogate + 1.2 * 2.0).abs() < 1e-12);
        assert!(g.mean.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = PolicyNet::new(2, 2, &[5], -0.3, &mut rng).unwrap();
        let b = toy_batch(&policy, &mut rng, 40);
        let batch: Vec<usize> = (0..40).collect();
        let (_, g) = actor_loss(&policy, &b, &batch, 0.2, 0.01);
        let n_mean = policy.mean.params().len();
        let mut flat = policy.mean.params().to_vec();
        flat.extend_from_slice(&policy.log_std);
        let fd = finite_difference(
            |p| {
                let mut probe = policy.clone();
                probe.mean.set_params(p[..n_mean].to_vec()).unwrap();
                probe.log_std = p[n_mean..].to_vec();
                actor_loss(&probe, &b, &batch, 0.2, 0.01).0.total
            },
            &flat,
            1e-6,
        );
        let mut analytic = g.mean.clone();
        analytic.extend_from_slice(&g.log_std);
        assert!(relative_error(&analytic, &fd) < 1e-4);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = PolicyNet::new(2, 1, &[3], -0.5, &mut rng).unwrap();
        let critic = new_critic(2, &[6, 6], &mut rng).unwrap();
        let b = toy_batch(&policy, &mut rng, 30);
        let batch: Vec<usize> = (0..30).collect();
        let (loss, g) = critic_loss(&critic, &b, &batch);
        assert!(loss > 0.0);
        let fd = finite_difference(
            |p| {
                let mut probe = critic.clone();
                probe.set_params(p.to_vec()).unwrap();
                critic_loss(&probe, &b, &batch).0
            },
            critic.params(),
            1e-6,
        );
        assert!(relative_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn perfect_critic_has_zero_loss() {
        let critic = Mlp::zeros(&[1, 2, 1], Activation::Tanh, Activation::Linear).unwrap();
        let b = RolloutBatch {
            observations: vec![vec![0.3]; 3],
            returns: vec![0.0; 3],
            ..Default::default()
        };
        assert_eq!(critic_loss(&critic, &b, &[0, 1, 2]).0, 0.0);
    }

    /// PPO on a one-step bandit with reward −(a − 0.5)².
    fn bandit_run(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = PolicyNet::new(1, 1, &[8], -0.5, &mut rng).unwrap();
        let mut adam_mean = AdamState::new(policy.mean.params().len());
        let mut adam_std = AdamState::new(1);
        let obs = vec![1.0];
        for _ in 0..200 {
            let mut b = RolloutBatch::default();
            for _ in 0..64 {
                let (a, lp) = policy.sample(&obs, &mut rng);
                let r = -(a[0].clamp(-1.0, 1.0) - 0.5).powi(2);
                b.observations.push(obs.clone());
                b.actions.push(a);
                b.log_probs_old.push(lp);
                b.rewards.push(r);
            }
            b.advantages = b.rewards.clone();
            normalize(&mut b.advantages);
            let batch: Vec<usize> = (0..64).collect();
            for _ in 0..4 {
                let (_, g) = actor_loss(&policy, &b, &batch, 0.2, 0.0);
                adam_step(policy.mean.params_mut(), &g.mean, &mut adam_mean, 3e-3).unwrap();
                adam_step(&mut policy.log_std, &g.log_std, &mut adam_std, 3e-3).unwrap();
            }
        }
        policy.act(&obs)[0]
    }

    #[test]
    fn bandit_converges_to_optimum() {
        let mut finals: Vec<f64> = (0..5).map(bandit_run).collect();
        finals.sort_by(f64::total_cmp);
        assert!((finals[2] - 0.5).abs() < 0.1, "{finals:?}");
    }
}
