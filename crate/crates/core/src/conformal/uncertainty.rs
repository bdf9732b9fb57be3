//! Differentiable per-dimension radius network and its training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{concat, DynModel, Standardizer, Transition};
use crate::error::Result;
use crate::nn::{Activation, Mlp, Tape, Var};

/// `η(s, a) = radius_scale ⊙ sigmoid-net(norm(s ⊕ a))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyNet {
    pub net: Mlp,
    pub input_norm: Standardizer,
    pub radius_scale: Vec<f64>,
}

impl UncertaintyNet {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(state_dim);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Tanh, Activation::Sigmoid, rng)?,
            input_norm: Standardizer::identity(state_dim + action_dim),
            radius_scale: vec![1.0; state_dim],
        })
    }

    pub fn radii(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let out = self.net.forward_unchecked(&self.input_norm.apply(&concat(state, action)));
        out.iter().zip(&self.radius_scale).map(|(o, r)| o * r).collect()
    }

    pub fn radii_tape(&self, tape: &mut Tape, params: Var, state: Var, action: Var) -> Var {
        let x = tape.concat(&[state, action]);
        let z = self.input_norm.apply_tape(tape, x);
        let out = self.net.forward_tape(tape, params, z);
        tape.mul_const(out, &self.radius_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalLosses {
    pub efficiency: f64,
    pub coverage: f64,
    pub total: f64,
    pub coverage_proxy: f64,
}

/// Efficiency, coverage and Lagrangian losses over `batch`, with the gradient
/// of `total` with respect to the radius network's parameters. The dynamics
/// model enters only through its (constant) predictions.
#[allow(clippy::too_many_arguments)]
pub fn conformal_losses(
    unc: &UncertaintyNet,
    model: &DynModel,
    data: &[Transition],
    batch: &[usize],
    alpha: f64,
    lambda: f64,
    floor: f64,
    temperature: f64,
) -> (ConformalLosses, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let dim = unc.radius_scale.len();
    let mut efficiency = 0.0;
    let mut proxy = 0.0;
    let mut traces = Vec::with_capacity(batch.len());
    // Per-sample pieces needed for the backward pass.
    let mut eff_grads = Vec::with_capacity(batch.len());
    let mut cov_parts = Vec::with_capacity(batch.len());
    for &i in batch {
        let t = &data[i];
        let trace = unc.net.forward_trace(&unc.input_norm.apply(&concat(&t.state, &t.action)));
        let eta: Vec<f64> = trace.output().iter().zip(&unc.radius_scale).map(|(o, r)| o * r).collect();
        efficiency += eta.iter().product::<f64>() / n;
        let partials: Vec<f64> = (0..dim)
            .map(|j| (0..dim).filter(|&k| k != j).map(|k| eta[k]).product())
            .collect();
        eff_grads.push(partials);

        let pred = model.predict_unchecked(&t.state, &t.action);
        let mut worst = (0, f64::NEG_INFINITY);
        for j in 0..dim {
            let ratio = (pred[j] - t.next_state[j]).abs() / eta[j].max(floor);
            if ratio > worst.1 {
                worst = (j, ratio);
            }
        }
        let p = sigmoid(temperature * (1.0 - worst.1));
        proxy += p / n;
        let (j, _) = worst;
        // d ratio / d eta_j, zero when the floor is active.
        let d_ratio = if eta[j] >= floor {
            -(pred[j] - t.next_state[j]).abs() / (eta[j] * eta[j])
        } else {
            0.0
        };
        cov_parts.push((j, -temperature * p * (1.0 - p) * d_ratio));
        traces.push(trace);
    }
    let gap = 1.0 - alpha - proxy;
    let coverage = gap.max(0.0);
    let total = efficiency + lambda * coverage;
    let d_cov_d_proxy = if gap > 0.0 { -1.0 } else { 0.0 };

    let mut grad = vec![0.0; unc.net.params().len()];
    for ((trace, partials), (j, d_proxy_d_eta)) in traces.iter().zip(&eff_grads).zip(&cov_parts) {
        let mut g_eta: Vec<f64> = partials.iter().map(|p| p / n).collect();
        g_eta[*j] += lambda * d_cov_d_proxy * d_proxy_d_eta / n;
        let g_out: Vec<f64> = g_eta.iter().zip(&unc.radius_scale).map(|(g, r)| g * r).collect();
        unc.net.backward(trace, &g_out, &mut grad);
    }
    (
        ConformalLosses {
            efficiency,
            coverage,
            total,
            coverage_proxy: proxy,
        },
        grad,
    )
}

/// Fraction of transitions whose next state lies inside `f̂(s, a) ± η(s, a)`.
pub fn hard_coverage(unc: &UncertaintyNet, model: &DynModel, data: &[Transition]) -> f64 {
    if data.is_empty() {
        return 1.0;
    }
    let inside = data
        .iter()
        .filter(|t| {
            let pred = model.predict_unchecked(&t.state, &t.action);
            let eta = unc.radii(&t.state, &t.action);
            pred.iter()
                .zip(&t.next_state)
                .zip(&eta)
                .all(|((p, s), e)| (p - s).abs() <= *e)
        })
        .count();
    inside as f64 / data.len() as f64
}

/// Projected ascent step on the multiplier.
pub fn lambda_update(lambda: f64, coverage_loss: f64, step: f64) -> f64 {
    (lambda + step * coverage_loss).max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let a = vec![rng.random_range(-1.0..1.0)];
                let next = vec![s[0] + rng.random_range(-0.05..0.05), s[1] + 0.1 * a[0]];
                Transition {
                    state: s,
                    action: a,
                    next_state: next,
                    step: 0,
                }
            })
            .collect()
    }

    #[test]
    fn efficiency_is_product_of_radii() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut unc = UncertaintyNet::new(2, 1, &[3], &mut rng).unwrap();
        unc.net = Mlp::zeros(&[3, 3, 2], Activation::Tanh, Activation::Sigmoid).unwrap();
        unc.radius_scale = vec![0.2, 0.2];
        let model = DynModel::zeros(2, 1, &[2]).unwrap();
        let d = data(&mut rng, 10);
        let batch: Vec<usize> = (0..10).collect();
        let (l, _) = conformal_losses(&unc, &model, &d, &batch, 0.1, 0.0, 1e-6, 10.0);
        assert!((l.efficiency - 0.01).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_proxy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let unc = UncertaintyNet::new(1, 1, &[2], &mut rng).unwrap();
        let model = DynModel::zeros(1, 1, &[2]).unwrap();
        let d = vec![Transition {
            state: vec![0.3],
            action: vec![0.1],
            next_state: vec![0.3],
            step: 0,
        }];
        let (l, _) = conformal_losses(&unc, &model, &d, &[0], 0.1, 2.0, 1e-6, 10.0);
        assert!((l.coverage_proxy - 0.9999546).abs() < 1e-7);
        assert_eq!(l.coverage, 0.0);
        assert_eq!(l.total, l.efficiency);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = data(&mut rng, 24);
        let mut unc = UncertaintyNet::new(2, 1, &[4], &mut rng).unwrap();
        // Small radii keep the coverage hinge active.
        unc.radius_scale = vec![0.03, 0.05];
        let model = DynModel::zeros(2, 1, &[2]).unwrap();
        let batch: Vec<usize> = (0..24).collect();
        let (l, grad) = conformal_losses(&unc, &model, &d, &batch, 0.1, 3.0, 1e-6, 10.0);
        assert!(l.coverage > 0.0);
        let fd = finite_difference(
            |p| {
                let mut probe = unc.clone();
                probe.net.set_params(p.to_vec()).unwrap();
                conformal_losses(&probe, &model, &d, &batch, 0.1, 3.0, 1e-6, 10.0).0.total
            },
            unc.net.params(),
            1e-6,
        );
        assert!(relative_error(&grad, &fd) < 1e-5);
    }

    #[test]
    fn huge_radii_cover_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = data(&mut rng, 50);
        let mut unc = UncertaintyNet::new(2, 1, &[3], &mut rng).unwrap();
        unc.radius_scale = vec![1e9, 1e9];
        let model = DynModel::zeros(2, 1, &[2]).unwrap();
        assert_eq!(hard_coverage(&unc, &model, &d), 1.0);
    }

    #[test]
    fn sharp_proxy_tracks_hard_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = data(&mut rng, 400);
        let unc = UncertaintyNet::new(2, 1, &[3], &mut rng).unwrap();
        let model = DynModel::zeros(2, 1, &[2]).unwrap();
        let batch: Vec<usize> = (0..d.len())
            .filter(|&i| {
                let t = &d[i];
                let eta = unc.radii(&t.state, &t.action);
                let r = (0..2)
                    .map(|j| (t.next_state[j] - t.state[j]).abs() / eta[j])
                    .fold(0.0, f64::max);
                (r - 1.0).abs() > 0.05
            })
            .collect();
        let subset: Vec<Transition> = batch.iter().map(|&i| d[i].clone()).collect();
        let (l, _) = conformal_losses(&unc, &model, &d, &batch, 0.1, 0.0, 1e-6, 1e3);
        assert!((l.coverage_proxy - hard_coverage(&unc, &model, &subset)).abs() <= 0.02);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_update(0.3, 0.0, 0.01), 0.3);
        assert!((lambda_update(0.0, 0.05, 1.0) - 0.05).abs() < 1e-15);
        assert_eq!(lambda_update(0.0, -1.0, 1.0), 0.0);
    }

    #[test]
    fn tape_radii_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut unc = UncertaintyNet::new(2, 1, &[3], &mut rng).unwrap();
        unc.radius_scale = vec![0.4, 2.0];
        let mut tape = Tape::new();
        let p = unc.net.param_leaf(&mut tape);
        let s = tape.leaf(vec![0.1, 0.2]);
        let a = tape.leaf(vec![-0.5]);
        let r = unc.radii_tape(&mut tape, p, s, a);
        assert_eq!(tape.value(r), unc.radii(&[0.1, 0.2], &[-0.5]).as_slice());
    }
}
