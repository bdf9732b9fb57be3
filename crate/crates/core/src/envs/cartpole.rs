use serde::{Deserialize, Serialize};

/// Cart-pole constants (pole modelled as a uniform rod of half-length `half_length`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    /// Newtons per unit action.
    pub force_scale: f64,
    pub theta_max: f64,
    pub x_max: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_scale: 10.0,
            theta_max: 0.2,
            x_max: 2.4,
        }
    }
}

impl CartPoleParams {
    /// `(θ̈, ẍ)` for state `(x, ẋ, θ, θ̇)` under horizontal force `force`.
    pub fn accelerations(&self, state: &[f64], force: f64) -> (f64, f64) {
        let theta = state[2];
        let theta_dot = state[3];
        let total = self.cart_mass + self.pole_mass;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + self.pole_mass * self.half_length * theta_dot * theta_dot * sin) / total;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.half_length * (4.0 / 3.0 - self.pole_mass * cos * cos / total));
        let x_acc = temp - self.pole_mass * self.half_length * theta_acc * cos / total;
        (theta_acc, x_acc)
    }

    pub fn derivatives(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let force = self.force_scale * action[0].clamp(-1.0, 1.0);
        let (theta_acc, x_acc) = self.accelerations(state, force);
        vec![state[1], x_acc, state[3], theta_acc]
    }

    /// Mechanical energy with zero potential at the pivot height.
    pub fn energy(&self, state: &[f64]) -> f64 {
        let (m, mc, l, g) = (self.pole_mass, self.cart_mass, self.half_length, self.gravity);
        let (x_dot, theta, theta_dot) = (state[1], state[2], state[3]);
        0.5 * (mc + m) * x_dot * x_dot
            + m * l * x_dot * theta_dot * theta.cos()
            + 0.5 * (4.0 / 3.0) * m * l * l * theta_dot * theta_dot
            + m * g * l * theta.cos()
    }
}
