use serde::{Deserialize, Serialize};

/// Kinematic bicycle in lane coordinates; state `(x, θ, v)` with `x` the
/// lateral offset from the lane centre and `θ` the heading error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicycleParams {
    pub l_front: f64,
    pub l_rear: f64,
    /// Steering angle (rad) per unit action.
    pub steer_scale: f64,
    /// Acceleration (m/s²) per unit action.
    pub accel_scale: f64,
    pub d_max: f64,
    pub theta_max: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            l_front: 1.45,
            l_rear: 1.45,
            steer_scale: std::f64::consts::PI / 6.0,
            accel_scale: 2.0,
            d_max: 0.7,
            theta_max: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl BicycleParams {
    pub fn slip_angle(&self, steer: f64) -> f64 {
        (self.l_rear / (self.l_front + self.l_rear) * steer.tan()).atan()
    }

    pub fn derivatives(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let steer = self.steer_scale * action[0].clamp(-1.0, 1.0);
        let accel = self.accel_scale * action[1].clamp(-1.0, 1.0);
        let (theta, v) = (state[1], state[2]);
        let beta = self.slip_angle(steer);
        vec![
            v * (theta + beta).sin(),
            v / self.l_rear * beta.sin(),
            accel,
        ]
    }

    pub fn reward(&self, next: &[f64]) -> f64 {
        let (x, theta) = (next[0], next[1]);
        -(x * x + 0.5 * (theta / self.theta_max).powi(2)) + 0.1
    }
}
