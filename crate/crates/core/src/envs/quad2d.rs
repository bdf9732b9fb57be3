use serde::{Deserialize, Serialize};

/// Planar quadrotor, state `(x, y, θ, ẋ, ẏ, θ̇)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarQuadParams {
    pub mass: f64,
    pub inertia: f64,
    pub arm: f64,
    pub gravity: f64,
    pub x_limits: [f64; 2],
    pub y_limits: [f64; 2],
    pub theta_max: f64,
    pub effort_penalty: f64,
    pub tilt_penalty: f64,
    pub tilt_threshold: f64,
}

impl Default for PlanarQuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: 0.01,
            arm: 0.25,
            gravity: 9.81,
            x_limits: [-6.0, 6.0],
            y_limits: [-4.0, 4.0],
            theta_max: std::f64::consts::FRAC_PI_3,
            effort_penalty: 0.001,
            tilt_penalty: 0.01,
            tilt_threshold: std::f64::consts::FRAC_PI_6,
        }
    }
}

impl PlanarQuadParams {
    /// Rotor thrusts `u_i = (mg/2)(1 + a_i)` clipped to `[0, mg]`.
    pub fn thrusts(&self, action: &[f64]) -> [f64; 2] {
        let hover = self.mass * self.gravity / 2.0;
        let max = self.mass * self.gravity;
        [
            (hover * (1.0 + action[0])).clamp(0.0, max),
            (hover * (1.0 + action[1])).clamp(0.0, max),
        ]
    }

    pub fn derivatives(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let [u1, u2] = self.thrusts(action);
        let theta = state[2];
        let (sin, cos) = theta.sin_cos();
        vec![
            state[3],
            state[4],
            state[5],
            -(u1 + u2) * sin / self.mass,
            (u1 + u2) * cos / self.mass - self.gravity,
            (u1 - u2) * self.arm / self.inertia,
        ]
    }
}
