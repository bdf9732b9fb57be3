//! Learned one-step dynamics surrogate.
//!
//! The network sees standardized `state ⊕ action` and predicts a scaled state
//! delta, so `predict(s, a) = s + net(norm(s ⊕ a)) ⊙ delta_scale`. Training
//! minimises the criticality-weighted quadratic residual `(1/N) Σ rᵀ W r`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, Mlp, Tape, Var};

/// Rollouts whose state norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Floor applied to fitted standard deviations.
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    /// Step index of `state` within its episode.
    pub step: usize,
}

/// Affine input standardisation `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let n = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        Self {
            mean,
            std: var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn apply_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let neg_mean: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let centered = tape.add_const(x, &neg_mean);
        tape.mul_const(centered, &inv_std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynModel {
    pub net: Mlp,
    pub input_norm: Standardizer,
    pub delta_scale: Vec<f64>,
    state_dim: usize,
    action_dim: usize,
}

impl DynModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = layer_sizes(state_dim + action_dim, hidden, state_dim);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Tanh, Activation::Linear, rng)?,
            input_norm: Standardizer::identity(state_dim + action_dim),
            delta_scale: vec![1.0; state_dim],
            state_dim,
            action_dim,
        })
    }

    /// Model whose network is identically zero, so `predict(s, a) = s`.
    pub fn zeros(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        let sizes = layer_sizes(state_dim + action_dim, hidden, state_dim);
        Ok(Self {
            net: Mlp::zeros(&sizes, Activation::Tanh, Activation::Linear)?,
            input_norm: Standardizer::identity(state_dim + action_dim),
            delta_scale: vec![1.0; state_dim],
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Fits input standardisation and delta scales to a dataset.
    pub fn fit_normalization(&mut self, data: &[Transition]) {
        if data.is_empty() {
            return;
        }
        let inputs: Vec<Vec<f64>> = data.iter().map(|t| concat(&t.state, &t.action)).collect();
        self.input_norm = Standardizer::fit(self.state_dim + self.action_dim, inputs.iter().map(|v| v.as_slice()));
        let deltas: Vec<Vec<f64>> = data
            .iter()
            .map(|t| t.next_state.iter().zip(&t.state).map(|(b, a)| b - a).collect())
            .collect();
        self.delta_scale = Standardizer::fit(self.state_dim, deltas.iter().map(|v| v.as_slice())).std;
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let expected = self.state_dim + self.action_dim;
        if state.len() + action.len() != expected || state.len() != self.state_dim {
            return Err(Error::InputShape {
                expected,
                got: state.len() + action.len(),
            });
        }
        Ok(self.predict_unchecked(state, action))
    }

    pub fn predict_unchecked(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let x = self.input_norm.apply(&concat(state, action));
        let out = self.net.forward_unchecked(&x);
        state
            .iter()
            .zip(out.iter().zip(&self.delta_scale))
            .map(|(s, (o, k))| s + o * k)
            .collect()
    }

    /// Prediction recorded on `tape` with parameters read from `params`.
    pub fn predict_tape(&self, tape: &mut Tape, params: Var, state: Var, action: Var) -> Var {
        let x = tape.concat(&[state, action]);
        let z = self.input_norm.apply_tape(tape, x);
        let out = self.net.forward_tape(tape, params, z);
        let delta = tape.mul_const(out, &self.delta_scale);
        tape.add(state, delta)
    }

    /// `(1/N) Σ rᵀ W r` with `W = diag(weights)`.
    pub fn loss(&self, data: &[Transition], weights: &[f64]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        data.iter()
            .map(|t| {
                let pred = self.predict_unchecked(&t.state, &t.action);
                quadratic_residual(&pred, &t.next_state, weights)
            })
            .sum::<f64>()
            / data.len() as f64
    }

    /// Loss and parameter gradient over the transitions selected by `batch`.
    pub fn loss_and_grad(&self, data: &[Transition], batch: &[usize], weights: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.net.params().len()];
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let t = &data[i];
            let x = self.input_norm.apply(&concat(&t.state, &t.action));
            let trace = self.net.forward_trace(&x);
            let out = trace.output();
            let mut g_out = vec![0.0; self.state_dim];
            for j in 0..self.state_dim {
                let r = t.state[j] + out[j] * self.delta_scale[j] - t.next_state[j];
                loss += weights[j] * r * r / n;
                g_out[j] = 2.0 * weights[j] * r * self.delta_scale[j] / n;
            }
            self.net.backward(&trace, &g_out, &mut grad);
        }
        (loss, grad)
    }

    /// One shuffled pass of minibatch Adam updates; returns the mean batch loss.
    pub fn train_pass<R: Rng + ?Sized>(
        &mut self,
        data: &[Transition],
        weights: &[f64],
        minibatch: usize,
        lr: f64,
        adam: &mut AdamState,
        rng: &mut R,
    ) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(minibatch.max(1)) {
            let (loss, grad) = self.loss_and_grad(data, batch, weights);
            if !loss.is_finite() {
                return Err(Error::Diverged("dynamics loss is not finite".into()));
            }
            adam_step(self.net.params_mut(), &grad, adam, lr)?;
            total += loss;
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

pub(crate) fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// `rᵀ diag(w) r` for `r = pred − target`.
pub fn quadratic_residual(pred: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t).powi(2))
        .sum()
}

fn check_state(state: &[f64], step: usize) -> Result<()> {
    let norm = state.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm.is_finite() && norm <= DIVERGENCE_NORM {
        Ok(())
    } else {
        Err(Error::RolloutDiverged { step })
    }
}

/// Predicted states `ŝ₁..ŝ_K` and actions `a₀..a_{K−1}` of a closed-loop
/// surrogate rollout. `policy` receives the predicted state and its step index.
pub fn rollout(
    model: &DynModel,
    policy: &dyn Fn(&[f64], usize) -> Vec<f64>,
    s0: &[f64],
    k: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if k == 0 {
        return Err(Error::Contract("rollout horizon must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(k);
    let mut actions = Vec::with_capacity(k);
    let mut s = s0.to_vec();
    for t in 0..k {
        let a = policy(&s, t);
        let next = model.predict(&s, &a)?;
        check_state(&next, t + 1)?;
        actions.push(a);
        states.push(next.clone());
        s = next;
    }
    Ok((states, actions))
}

/// Differentiable rollout. `policy` maps a state node and step index to an
/// action node on the same tape.
pub fn rollout_tape(
    tape: &mut Tape,
    model: &DynModel,
    model_params: Var,
    s0: Var,
    k: usize,
    mut policy: impl FnMut(&mut Tape, Var, usize) -> Var,
) -> Result<(Vec<Var>, Vec<Var>)> {
    if k == 0 {
        return Err(Error::Contract("rollout horizon must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(k);
    let mut actions = Vec::with_capacity(k);
    let mut s = s0;
    for t in 0..k {
        let a = policy(tape, s, t);
        let next = model.predict_tape(tape, model_params, s, a);
        check_state(tape.value(next), t + 1)?;
        actions.push(a);
        states.push(next);
        s = next;
    }
    Ok((states, actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = vec![rng.random_range(-1.0..1.0)];
                let next = vec![s[0] + 0.1 * s[1], s[1] + 0.1 * (a[0] - s[0].sin())];
                Transition {
                    state: s,
                    action: a,
                    next_state: next,
                    step: i % 7,
                }
            })
            .collect()
    }

    #[test]
    fn zero_network_is_identity() {
        let m = DynModel::zeros(3, 2, &[4]).unwrap();
        assert_eq!(m.predict(&[1.0, -2.0, 0.5], &[0.3, 0.1]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(matches!(m.predict(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::InputShape { .. })));
    }

    #[test]
    fn weighted_residual_example() {
        assert_eq!(quadratic_residual(&[1.0, 0.0], &[0.0, 0.0], &[1.25, 1.0]), 1.25);
    }

    #[test]
    fn identity_weight_is_mean_squared_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = sample_data(&mut rng, 20);
        let m = DynModel::new(2, 1, &[6], &mut rng).unwrap();
        let mse: f64 = data
            .iter()
            .map(|t| {
                let p = m.predict_unchecked(&t.state, &t.action);
                p.iter().zip(&t.next_state).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 20.0;
        assert!((m.loss(&data, &[1.0, 1.0]) - mse).abs() < 1e-14);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = sample_data(&mut rng, 16);
        let mut m = DynModel::new(2, 1, &[5, 5], &mut rng).unwrap();
        m.fit_normalization(&data);
        let w = [2.0, 0.7];
        let batch: Vec<usize> = (0..16).collect();
        let (loss, grad) = m.loss_and_grad(&data, &batch, &w);
        assert!((loss - m.loss(&data, &w)).abs() < 1e-12);
        let fd = finite_difference(
            |p| {
                let mut probe = m.clone();
                probe.net.set_params(p.to_vec()).unwrap();
                probe.loss(&data, &w)
            },
            m.net.params(),
            1e-6,
        );
        assert!(crate::nn::relative_error(&grad, &fd) < 1e-6);
    }

    #[test]
    fn training_reduces_held_out_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let train = sample_data(&mut rng, 2000);
        let held = sample_data(&mut rng, 500);
        let mut m = DynModel::new(2, 1, &[16, 16], &mut rng).unwrap();
        m.fit_normalization(&train);
        let w = [1.0, 1.0];
        let before = m.loss(&held, &w);
        let mut adam = AdamState::new(m.net.params().len());
        for _ in 0..20 {
            m.train_pass(&train, &w, 64, 3e-3, &mut adam, &mut rng).unwrap();
        }
        assert!(m.loss(&held, &w) < 0.05 * before);
    }

    #[test]
    fn tape_prediction_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = sample_data(&mut rng, 50);
        let mut m = DynModel::new(2, 1, &[4], &mut rng).unwrap();
        m.fit_normalization(&data);
        let mut tape = Tape::new();
        let p = m.net.param_leaf(&mut tape);
        let s = tape.leaf(vec![0.2, -0.4]);
        let a = tape.leaf(vec![0.9]);
        let y = m.predict_tape(&mut tape, p, s, a);
        assert_eq!(tape.value(y), m.predict_unchecked(&[0.2, -0.4], &[0.9]).as_slice());
    }

    #[test]
    fn fixed_point_rollout() {
        let m = DynModel::zeros(2, 1, &[3]).unwrap();
        let (states, actions) = rollout(&m, &|_, _| vec![0.5], &[1.0, 2.0], 4).unwrap();
        assert!(states.iter().all(|s| s == &vec![1.0, 2.0]));
        assert_eq!(actions.len(), 4);
        assert!(rollout(&m, &|_, _| vec![0.5], &[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn diverging_rollout_is_reported() {
        let mut m = DynModel::zeros(1, 1, &[1]).unwrap();
        let n = m.net.params().len();
        let mut p = vec![0.0; n];
        *p.last_mut().unwrap() = 1.0;
        m.net.set_params(p).unwrap();
        m.delta_scale = vec![1e5];
        let err = rollout(&m, &|_, _| vec![0.0], &[0.0], 50).unwrap_err();
        assert!(matches!(err, Error::RolloutDiverged { step: 11 }));
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = DynModel::new(2, 1, &[4], &mut rng).unwrap();
        let gain = vec![0.3, -0.8];
        let objective = |g: &[f64]| {
            let (states, _) = rollout(&m, &|s, _| vec![(g[0] * s[0] + g[1] * s[1]).tanh()], &[0.5, -0.2], 5).unwrap();
            states.iter().map(|s| s[0] * s[0] + s[1]).sum::<f64>()
        };
        let mut tape = Tape::new();
        let p = m.net.param_leaf(&mut tape);
        let gv = tape.leaf(gain.clone());
        let s0 = tape.leaf(vec![0.5, -0.2]);
        let (states, _) = rollout_tape(&mut tape, &m, p, s0, 5, |tape, s, _| {
            let prod = tape.mul(s, gv);
            let sum = tape.sum(prod);
            tape.tanh(sum)
        })
        .unwrap();
        let terms: Vec<Var> = states
            .iter()
            .map(|&s| {
                let x = tape.slice(s, 0, 1);
                let sq = tape.square(x);
                let v = tape.slice(s, 1, 1);
                tape.add(sq, v)
            })
            .collect();
        let total = tape.add_many(&terms);
        assert!((tape.scalar(total) - objective(&gain)).abs() < 1e-12);
        let g = tape.backward(total).unwrap();
        let fd = finite_difference(objective, &gain, 1e-6);
        assert!(crate::nn::relative_error(g.wrt(gv), &fd) < 1e-6);
    }
}
