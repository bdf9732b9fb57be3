use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(Error::InputShape {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let lr = 0.01;
        adam_step(&mut p, &[3.0, -0.5], &mut s, lr).unwrap();
        assert!((p[0] + lr * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - lr * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_descend_a_quadratic() {
        let f = |p: &[f64]| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 2.0).powi(2);
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let before = f(&p);
        for _ in 0..2 {
            let g = [2.0 * (p[0] - 1.0), 6.0 * (p[1] + 2.0)];
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        assert!(f(&p) < before);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN], &mut s, 0.1),
            Err(Error::Diverged(_))
        ));
        assert_eq!(s.step_count, 0);
    }
}
