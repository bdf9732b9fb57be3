//! Differentiable safety objectives over surrogate rollouts from a fixed set
//! of initial states.
//!
//! Step `t` of a rollout from `s₀` is the box centred at `ŝ_t` with radii
//! `η(ŝ_{t−1}, a_{t−1})`; its score is `g_box`. The max loss is the largest
//! score over all starts and steps `1..=K`, the improvement loss compares the
//! first and last step of each rollout.

use serde::{Deserialize, Serialize};

use crate::conformal::UncertaintyNet;
use crate::dynamics::{rollout_tape, DynModel};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::rl::PolicyNet;

/// Loss value reported when a surrogate rollout diverges.
pub const DIVERGED_LOSS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImproveSign {
    /// `g(step 1) − g(step K)`.
    AsPrinted,
    /// `g(step K) − g(step 1)`, rewarding a margin that grows along the rollout.
    AsDescribed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyWeights {
    pub max: f64,
    pub improve: f64,
    pub improve_sign: ImproveSign,
}

impl Default for SafetyWeights {
    fn default() -> Self {
        Self {
            max: 0.5,
            improve: 1.0,
            improve_sign: ImproveSign::AsDescribed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyLosses {
    pub max: f64,
    pub improve: f64,
    pub total: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyGradient {
    pub policy: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

pub fn combine(max: f64, improve: f64, weights: &SafetyWeights) -> f64 {
    weights.max * max + weights.improve * improve
}

struct Rollout {
    tape: Tape,
    policy_params: Var,
    unc_params: Var,
    scores: Vec<Var>,
}

fn record(
    env: &Env,
    policy: &PolicyNet,
    model: &DynModel,
    unc: &UncertaintyNet,
    s0: &[f64],
    horizon: usize,
) -> Result<Rollout> {
    let mut tape = Tape::new();
    let policy_params = policy.mean.param_leaf(&mut tape);
    let unc_params = unc.net.param_leaf(&mut tape);
    let model_params = model.net.param_leaf(&mut tape);
    let start = tape.leaf(s0.to_vec());
    let (states, actions) = rollout_tape(&mut tape, model, model_params, start, horizon, |tape, s, t| {
        let obs = env.observe_tape(tape, s, t);
        policy.mean_tape(tape, policy_params, obs)
    })?;
    let mut scores = Vec::with_capacity(horizon);
    let mut prev = start;
    for (t, (&s, &a)) in states.iter().zip(&actions).enumerate() {
        let radii = unc.radii_tape(&mut tape, unc_params, prev, a);
        scores.push(env.spec().g_box_tape(&mut tape, s, radii, t + 1));
        prev = s;
    }
    Ok(Rollout {
        tape,
        policy_params,
        unc_params,
        scores,
    })
}

fn accumulate(target: &mut [f64], g: &[f64]) {
    for (t, x) in target.iter_mut().zip(g) {
        *t += x;
    }
}

/// Both safety losses, their weighted sum and the gradient of the weighted
/// sum with respect to the policy mean network and the radius network.
pub fn safety_losses(
    env: &Env,
    policy: &PolicyNet,
    model: &DynModel,
    unc: &UncertaintyNet,
    init_states: &[Vec<f64>],
    horizon: usize,
    weights: &SafetyWeights,
) -> Result<(SafetyLosses, SafetyGradient)> {
    if horizon == 0 || init_states.is_empty() {
        return Err(Error::Contract("safety losses need a horizon and initial states".into()));
    }
    let mut grad = SafetyGradient {
        policy: vec![0.0; policy.mean.params().len()],
        uncertainty: vec![0.0; unc.net.params().len()],
    };
    let scale = 1.0 / (init_states.len() * horizon) as f64;
    let sign = match weights.improve_sign {
        ImproveSign::AsPrinted => 1.0,
        ImproveSign::AsDescribed => -1.0,
    };
    let mut improve = 0.0;
    let mut worst: Option<(f64, usize, usize)> = None;
    for (i, s0) in init_states.iter().enumerate() {
        let mut r = match record(env, policy, model, unc, s0, horizon) {
            Ok(r) => r,
            Err(Error::RolloutDiverged { .. }) => {
                let diverged = SafetyLosses {
                    max: DIVERGED_LOSS,
                    improve: 0.0,
                    total: combine(DIVERGED_LOSS, 0.0, weights),
                    diverged: true,
                };
                grad.policy.fill(0.0);
                grad.uncertainty.fill(0.0);
                return Ok((diverged, grad));
            }
            Err(e) => return Err(e),
        };
        for (t, &v) in r.scores.iter().enumerate() {
            let value = r.tape.scalar(v);
            if worst.is_none_or(|(w, _, _)| value > w) {
                worst = Some((value, i, t));
            }
        }
        let first = r.scores[0];
        let last = r.scores[horizon - 1];
        let diff = r.tape.sub(first, last);
        let term = r.tape.scale(diff, sign * scale);
        improve += r.tape.scalar(term);
        if weights.improve != 0.0 && horizon > 1 {
            let weighted = r.tape.scale(term, weights.improve);
            let g = r.tape.backward(weighted)?;
            accumulate(&mut grad.policy, g.wrt(r.policy_params));
            accumulate(&mut grad.uncertainty, g.wrt(r.unc_params));
        }
    }
    let (max, i, t) = worst.expect("at least one score");
    if weights.max != 0.0 {
        let mut r = record(env, policy, model, unc, &init_states[i], t + 1)?;
        let weighted = r.tape.scale(r.scores[t], weights.max);
        let g = r.tape.backward(weighted)?;
        accumulate(&mut grad.policy, g.wrt(r.policy_params));
        accumulate(&mut grad.uncertainty, g.wrt(r.unc_params));
    }
    if !max.is_finite() {
        return Err(Error::Diverged("non-finite safety score".into()));
    }
    Ok((
        SafetyLosses {
            max,
            improve,
            total: combine(max, improve, weights),
            diverged: false,
        },
        grad,
    ))
}

/// Plain forward evaluation of the per-step box scores `g_1..g_K` from `s₀`.
pub fn box_scores(
    env: &Env,
    policy: &PolicyNet,
    model: &DynModel,
    unc: &UncertaintyNet,
    s0: &[f64],
    horizon: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(horizon);
    let mut s = s0.to_vec();
    for t in 0..horizon {
        let a = policy.act(&env.observe(&s, t));
        let next = model.predict(&s, &a)?;
        let radii = unc.radii(&s, &a);
        scores.push(env.spec().g_box_slices(&next, &radii, t + 1));
        s = next;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::nn::{finite_difference, relative_error, Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parts(seed: u64) -> (Env, PolicyNet, DynModel, UncertaintyNet, Vec<Vec<f64>>) {
        let env = Env::new(EnvKind::Cartpole);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyNet::new(4, 1, &[5], -0.5, &mut rng).unwrap();
        let mut model = DynModel::new(4, 1, &[6], &mut rng).unwrap();
        model.delta_scale = vec![0.02; 4];
        let mut unc = UncertaintyNet::new(4, 1, &[4], &mut rng).unwrap();
        unc.radius_scale = vec![0.05, 0.1, 0.05, 0.1];
        let init: Vec<Vec<f64>> = (0..6).map(|_| env.reset(&mut rng).state).collect();
        (env, policy, model, unc, init)
    }

    #[test]
    fn point_boxes_give_pointwise_maximum() {
        let (env, policy, model, mut unc, init) = parts(1);
        unc.net = Mlp::zeros(unc.net.sizes(), Activation::Tanh, Activation::Sigmoid).unwrap();
        unc.radius_scale = vec![0.0; 4];
        let w = SafetyWeights::default();
        let (l, _) = safety_losses(&env, &policy, &model, &unc, &init, 4, &w).unwrap();
        let mut expected = f64::NEG_INFINITY;
        for s0 in &init {
            for g in box_scores(&env, &policy, &model, &unc, s0, 4).unwrap() {
                expected = expected.max(g);
            }
        }
        assert_eq!(l.max, expected);
        assert!(l.max < 0.0);
    }

    #[test]
    fn unit_horizon_has_no_improvement_term() {
        let (env, policy, model, unc, init) = parts(2);
        let (l, _) = safety_losses(&env, &policy, &model, &unc, &init, 1, &SafetyWeights::default()).unwrap();
        assert_eq!(l.improve, 0.0);
    }

    #[test]
    fn weighted_sum_examples() {
        let w = SafetyWeights::default();
        assert!((combine(0.1, -0.2, &w) + 0.15).abs() < 1e-15);
        let only_max = SafetyWeights {
            max: 1.0,
            improve: 0.0,
            ..w
        };
        assert_eq!(combine(0.3, 7.0, &only_max), 0.3);
    }

    #[test]
    fn wider_radii_never_lower_the_max() {
        let (env, policy, model, mut unc, init) = parts(3);
        let w = SafetyWeights::default();
        let (narrow, _) = safety_losses(&env, &policy, &model, &unc, &init, 5, &w).unwrap();
        for r in unc.radius_scale.iter_mut() {
            *r *= 2.0;
        }
        let (wide, _) = safety_losses(&env, &policy, &model, &unc, &init, 5, &w).unwrap();
        assert!(wide.max >= narrow.max);
    }

    #[test]
    fn recomputation_is_bit_identical() {
        let (env, policy, model, unc, init) = parts(4);
        let w = SafetyWeights::default();
        let a = safety_losses(&env, &policy, &model, &unc, &init, 6, &w).unwrap();
        let b = safety_losses(&env, &policy, &model, &unc, &init, 6, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sign_switch_flips_improvement() {
        let (env, policy, model, unc, init) = parts(5);
        let described = SafetyWeights::default();
        let printed = SafetyWeights {
            improve_sign: ImproveSign::AsPrinted,
            ..described
        };
        let (a, _) = safety_losses(&env, &policy, &model, &unc, &init, 6, &described).unwrap();
        let (b, _) = safety_losses(&env, &policy, &model, &unc, &init, 6, &printed).unwrap();
        assert_eq!(a.improve, -b.improve);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (env, policy, model, unc, init) = parts(6);
        let w = SafetyWeights::default();
        let (_, g) = safety_losses(&env, &policy, &model, &unc, &init, 5, &w).unwrap();
        assert!(g.uncertainty.iter().any(|x| *x != 0.0));
        let fd_policy = finite_difference(
            |p| {
                let mut probe = policy.clone();
                probe.mean.set_params(p.to_vec()).unwrap();
                safety_losses(&env, &probe, &model, &unc, &init, 5, &w).unwrap().0.total
            },
            policy.mean.params(),
            1e-6,
        );
        assert!(relative_error(&g.policy, &fd_policy) < 1e-4);
        let fd_unc = finite_difference(
            |p| {
                let mut probe = unc.clone();
                probe.net.set_params(p.to_vec()).unwrap();
                safety_losses(&env, &policy, &model, &probe, &init, 5, &w).unwrap().0.total
            },
            unc.net.params(),
            1e-6,
        );
        assert!(relative_error(&g.uncertainty, &fd_unc) < 1e-4);
    }
}
