use serde::{Deserialize, Serialize};

/// Quadrotor in 3D with ZYX Euler angles.
///
/// State layout: position `(x, y, z)`, angles `(φ, θ, ψ)`, linear velocity,
/// body angular velocity `ω`. The world `z` axis points up. Motors sit in a
/// `+` configuration: 1 on `+x`, 2 on `+y`, 3 on `−x`, 4 on `−y`, with 1/3
/// spinning opposite to 2/4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialQuadParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub arm: f64,
    /// Yaw torque (N·m) per newton of rotor thrust.
    pub yaw_coeff: f64,
    pub gravity: f64,
    pub position_limit: f64,
    pub attitude_max: f64,
    pub effort_penalty: f64,
    pub attitude_penalty: f64,
}

impl Default for SpatialQuadParams {
    fn default() -> Self {
        Self {
            mass: 0.468,
            inertia: [4.9e-3, 4.9e-3, 4.8e-3],
            arm: 0.225,
            yaw_coeff: 0.01,
            gravity: 9.81,
            position_limit: 6.0,
            attitude_max: std::f64::consts::PI / 2.5,
            effort_penalty: 0.005,
            attitude_penalty: 0.05,
        }
    }
}

/// `R = Rz(ψ) Ry(θ) Rx(φ)`, row-major.
pub fn rotation(phi: f64, theta: f64, psi: f64) -> [[f64; 3]; 3] {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    [
        [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
        [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
        [-st, ct * sf, ct * cf],
    ]
}

impl SpatialQuadParams {
    /// Motor thrusts `f_i = (mg/4)(1 + a_i)` clipped to `[0, mg/2]`.
    pub fn thrusts(&self, action: &[f64]) -> [f64; 4] {
        let hover = self.mass * self.gravity / 4.0;
        let max = self.mass * self.gravity / 2.0;
        let mut f = [0.0; 4];
        for (fi, a) in f.iter_mut().zip(action) {
            *fi = (hover * (1.0 + a)).clamp(0.0, max);
        }
        f
    }

    pub fn torques(&self, f: &[f64; 4]) -> [f64; 3] {
        [
            self.arm * (f[1] - f[3]),
            self.arm * (f[2] - f[0]),
            self.yaw_coeff * (f[0] - f[1] + f[2] - f[3]),
        ]
    }

    pub fn derivatives(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let f = self.thrusts(action);
        let thrust: f64 = f.iter().sum();
        let tau = self.torques(&f);
        let (phi, theta, psi) = (state[3], state[4], state[5]);
        let w = [state[9], state[10], state[11]];
        let r = rotation(phi, theta, psi);

        let acc = [
            r[0][2] * thrust / self.mass,
            r[1][2] * thrust / self.mass,
            r[2][2] * thrust / self.mass - self.gravity,
        ];

        // Euler-angle rates from body rates; equivalent to Ṙ = R ω̂.
        let (sf, cf) = phi.sin_cos();
        let (tt, ct) = (theta.tan(), theta.cos());
        let phi_dot = w[0] + sf * tt * w[1] + cf * tt * w[2];
        let theta_dot = cf * w[1] - sf * w[2];
        let psi_dot = (sf * w[1] + cf * w[2]) / ct;

        let i = self.inertia;
        let iw = [i[0] * w[0], i[1] * w[1], i[2] * w[2]];
        let gyro = [
            w[1] * iw[2] - w[2] * iw[1],
            w[2] * iw[0] - w[0] * iw[2],
            w[0] * iw[1] - w[1] * iw[0],
        ];
        let w_dot = [
            (tau[0] - gyro[0]) / i[0],
            (tau[1] - gyro[1]) / i[1],
            (tau[2] - gyro[2]) / i[2],
        ];

        vec![
            state[6], state[7], state[8], phi_dot, theta_dot, psi_dot, acc[0], acc[1], acc[2],
            w_dot[0], w_dot[1], w_dot[2],
        ]
    }
}
