//! Vector-valued safety functions and exact worst-case evaluation over boxes.
//!
//! A state `s` is safe when every row of `h(s)` is `<= 0`. Rows are either
//! affine (`h_i(s) = a·s − b`) or point-distance
//! (`h_i(s) = d_safe − ‖p(s) − p_o(t)‖₂`, where `p(s)` picks position
//! coordinates out of the state and `p_o(t)` is a static or orbiting obstacle).
//!
//! Both row kinds have a closed-form maximum over an axis-aligned box, which
//! is what [`SafetySpec::g_box`] returns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};

/// Position of an obstacle as a function of the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    Static {
        position: Vec<f64>,
    },
    /// `center + (rx·cos(rate·t), ry·sin(rate·t))`.
    Orbit {
        center: [f64; 2],
        radii: [f64; 2],
        rate: f64,
    },
}

impl Obstacle {
    pub fn position(&self, step: usize) -> Vec<f64> {
        match self {
            Obstacle::Static { position } => position.clone(),
            Obstacle::Orbit {
                center,
                radii,
                rate,
            } => {
                let phase = rate * step as f64;
                vec![
                    center[0] + radii[0] * phase.cos(),
                    center[1] + radii[1] * phase.sin(),
                ]
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            Obstacle::Static { position } => position.len(),
            Obstacle::Orbit { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    Affine {
        a: Vec<f64>,
        b: f64,
    },
    PointDistance {
        position: Vec<usize>,
        obstacle: Obstacle,
        d_safe: f64,
    },
}

impl Constraint {
    /// Row `a·s − b` with a single non-zero coefficient.
    pub fn upper(state_dim: usize, index: usize, coeff: f64, b: f64) -> Self {
        let mut a = vec![0.0; state_dim];
        a[index] = coeff;
        Constraint::Affine { a, b }
    }

    fn value(&self, state: &[f64], step: usize) -> f64 {
        match self {
            Constraint::Affine { a, b } => dot(a, state) - b,
            Constraint::PointDistance {
                position,
                obstacle,
                d_safe,
            } => {
                let po = obstacle.position(step);
                let d2: f64 = position
                    .iter()
                    .zip(&po)
                    .map(|(&i, o)| (state[i] - o).powi(2))
                    .sum();
                d_safe - d2.sqrt()
            }
        }
    }

    fn box_max(&self, center: &[f64], radii: &[f64], step: usize) -> f64 {
        match self {
            Constraint::Affine { a, b } => {
                let spread: f64 = a.iter().zip(radii).map(|(ai, r)| ai.abs() * r).sum();
                dot(a, center) + spread - b
            }
            Constraint::PointDistance {
                position,
                obstacle,
                d_safe,
            } => {
                // Distance from the obstacle to the box, per axis.
                let po = obstacle.position(step);
                let d2: f64 = position
                    .iter()
                    .zip(&po)
                    .map(|(&i, o)| ((center[i] - o).abs() - radii[i]).max(0.0).powi(2))
                    .sum();
                d_safe - d2.sqrt()
            }
        }
    }

    fn box_max_tape(&self, tape: &mut Tape, center: Var, radii: Var, step: usize) -> Var {
        match self {
            Constraint::Affine { a, b } => {
                let lin = tape.dot_const(center, a);
                let abs_a: Vec<f64> = a.iter().map(|x| x.abs()).collect();
                let spread = tape.dot_const(radii, &abs_a);
                let s = tape.add(lin, spread);
                tape.offset(s, -b)
            }
            Constraint::PointDistance {
                position,
                obstacle,
                d_safe,
            } => {
                let po = obstacle.position(step);
                let mut gaps = Vec::with_capacity(position.len());
                for (&i, o) in position.iter().zip(&po) {
                    let c = tape.slice(center, i, 1);
                    let r = tape.slice(radii, i, 1);
                    let rel = tape.offset(c, -o);
                    let dist = tape.abs(rel);
                    let gap = tape.sub(dist, r);
                    gaps.push(tape.max_const(gap, 0.0));
                }
                let g = tape.concat(&gaps);
                let n = tape.norm2(g);
                let neg = tape.neg(n);
                tape.offset(neg, *d_safe)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Axis-aligned box `center ± radii` over the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachBox {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
}

impl ReachBox {
    pub fn new(center: Vec<f64>, radii: Vec<f64>) -> Result<Self> {
        if center.len() != radii.len() {
            return Err(Error::InputShape {
                expected: center.len(),
                got: radii.len(),
            });
        }
        if radii.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Contract("box radii must be non-negative".into()));
        }
        Ok(Self { center, radii })
    }

    pub fn point(center: Vec<f64>) -> Self {
        let radii = vec![0.0; center.len()];
        Self { center, radii }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub state_dim: usize,
    pub constraints: Vec<Constraint>,
}

impl SafetySpec {
    pub fn new(state_dim: usize, constraints: Vec<Constraint>) -> Result<Self> {
        let spec = Self {
            state_dim,
            constraints,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(Error::Config("safety spec needs at least one row".into()));
        }
        for (row, c) in self.constraints.iter().enumerate() {
            match c {
                Constraint::Affine { a, b } => {
                    if a.len() != self.state_dim {
                        return Err(Error::Config(format!(
                            "row {row}: affine coefficients have length {}, state has {}",
                            a.len(),
                            self.state_dim
                        )));
                    }
                    if a.iter().all(|x| *x == 0.0) || !b.is_finite() {
                        return Err(Error::Config(format!("row {row}: degenerate affine row")));
                    }
                }
                Constraint::PointDistance {
                    position,
                    obstacle,
                    d_safe,
                } => {
                    if *d_safe <= 0.0 {
                        return Err(Error::Config(format!("row {row}: d_safe must be positive")));
                    }
                    if position.len() != obstacle.dim()
                        || position.iter().any(|&i| i >= self.state_dim)
                    {
                        return Err(Error::Config(format!(
                            "row {row}: position indices do not match obstacle"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.constraints.len()
    }

    /// `h(s)` at step index `step` (only moving obstacles depend on it).
    pub fn h(&self, state: &[f64], step: usize) -> Vec<f64> {
        self.constraints.iter().map(|c| c.value(state, step)).collect()
    }

    pub fn is_safe_state(&self, state: &[f64], step: usize) -> bool {
        self.constraints.iter().all(|c| c.value(state, step) <= 0.0)
    }

    /// `max_i max_{s ∈ box} h_i(s)`.
    pub fn g_box(&self, reach: &ReachBox, step: usize) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.box_max(&reach.center, &reach.radii, step))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `g_box` for a box given as slices; NaN inputs yield `+∞`.
    pub fn g_box_slices(&self, center: &[f64], radii: &[f64], step: usize) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for c in &self.constraints {
            let v = c.box_max(center, radii, step);
            if v.is_nan() {
                return f64::INFINITY;
            }
            worst = worst.max(v);
        }
        worst
    }

    pub fn is_safe_box(&self, reach: &ReachBox, step: usize) -> bool {
        self.g_box(reach, step) <= 0.0
    }

    /// Differentiable `g_box` over tape nodes holding the center and radii.
    pub fn g_box_tape(&self, tape: &mut Tape, center: Var, radii: Var, step: usize) -> Var {
        let rows: Vec<Var> = self
            .constraints
            .iter()
            .map(|c| c.box_max_tape(tape, center, radii, step))
            .collect();
        let all = tape.concat(&rows);
        tape.max_reduce(all)
    }

    /// Safety-criticality weights `φ_j = Π_i (|∂h̄_i/∂s_j| / |b_i| + 1)`.
    ///
    /// Affine rows use their exact coefficients. Distance rows average the
    /// absolute gradient of `−‖p − p_o‖` over `samples` (state, step index).
    pub fn phi_weights(&self, samples: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
        let n = self.state_dim;
        let mut phi = vec![1.0; n];
        for (row, c) in self.constraints.iter().enumerate() {
            let (grad, offset) = match c {
                Constraint::Affine { a, b } => (a.iter().map(|x| x.abs()).collect::<Vec<_>>(), -b),
                Constraint::PointDistance {
                    position,
                    obstacle,
                    d_safe,
                } => {
                    if samples.is_empty() {
                        return Err(Error::Contract(
                            "distance rows need sample states for criticality weights".into(),
                        ));
                    }
                    let mut g = vec![0.0; n];
                    for (s, step) in samples {
                        let po = obstacle.position(*step);
                        let diff: Vec<f64> =
                            position.iter().zip(&po).map(|(&i, o)| s[i] - o).collect();
                        let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for (&i, d) in position.iter().zip(&diff) {
                                g[i] += (d / norm).abs();
                            }
                        }
                    }
                    for x in &mut g {
                        *x /= samples.len() as f64;
                    }
                    (g, *d_safe)
                }
            };
            if offset == 0.0 {
                return Err(Error::SpecNormalization { row });
            }
            for (p, gj) in phi.iter_mut().zip(&grad) {
                *p *= gj / offset.abs() + 1.0;
            }
        }
        Ok(phi)
    }

    /// State dimensions that appear in at least one row.
    pub fn constrained_dims(&self) -> Vec<usize> {
        let mut used = vec![false; self.state_dim];
        for c in &self.constraints {
            match c {
                Constraint::Affine { a, .. } => {
                    for (u, x) in used.iter_mut().zip(a) {
                        *u |= *x != 0.0;
                    }
                }
                Constraint::PointDistance { position, .. } => {
                    for &i in position {
                        used[i] = true;
                    }
                }
            }
        }
        (0..self.state_dim).filter(|&i| used[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cartpole_spec() -> SafetySpec {
        SafetySpec::new(
            4,
            vec![
                Constraint::upper(4, 2, 1.0, 0.2),
                Constraint::upper(4, 2, -1.0, 0.2),
                Constraint::upper(4, 0, 1.0, 2.4),
                Constraint::upper(4, 0, -1.0, 2.4),
            ],
        )
        .unwrap()
    }

    fn obstacle_spec() -> SafetySpec {
        SafetySpec::new(
            2,
            vec![Constraint::PointDistance {
                position: vec![0, 1],
                obstacle: Obstacle::Static {
                    position: vec![0.0, 0.0],
                },
                d_safe: 0.5,
            }],
        )
        .unwrap()
    }

    #[test]
    fn cartpole_rows_at_origin() {
        let spec = cartpole_spec();
        assert_eq!(spec.h(&[0.0; 4], 0), vec![-0.2, -0.2, -2.4, -2.4]);
        let edge = spec.h(&[0.0, 0.0, 0.2, 0.0], 0);
        assert_eq!(edge[0], 0.0);
        assert!(spec.is_safe_state(&[0.0, 0.0, 0.2, 0.0], 0));
    }

    #[test]
    fn distance_row_value() {
        let spec = obstacle_spec();
        let h = spec.h(&[1.0, 1.0], 0)[0];
        assert!((h - (0.5 - 2f64.sqrt())).abs() < 1e-12);
        assert!((h + 0.914214).abs() < 1e-6);
    }

    #[test]
    fn affine_box_maximum() {
        let spec = SafetySpec::new(2, vec![Constraint::Affine { a: vec![1.0, -1.0], b: 2.0 }]).unwrap();
        let b = ReachBox::new(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(spec.g_box(&b, 0), 0.0);
    }

    #[test]
    fn point_box_is_pointwise_max() {
        let spec = cartpole_spec();
        let s = vec![0.3, 0.0, -0.05, 0.1];
        let expected = spec.h(&s, 0).into_iter().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(spec.g_box(&ReachBox::point(s), 0), expected);
    }

    #[test]
    fn distance_box_uses_clamped_point() {
        let spec = obstacle_spec();
        let b = ReachBox::new(vec![1.0, 1.0], vec![0.2, 0.2]).unwrap();
        let g = spec.g_box(&b, 0);
        assert!((g - (0.5 - (0.8f64 * 0.8 * 2.0).sqrt())).abs() < 1e-12);
        assert!((g + 0.631371).abs() < 1e-6);
    }

    #[test]
    fn orbiting_obstacle_moves_with_step() {
        let o = Obstacle::Orbit {
            center: [0.0, 0.0],
            radii: [1.5, 1.2],
            rate: 0.05,
        };
        assert_eq!(o.position(0), vec![1.5, 0.0]);
        let p = o.position(10);
        assert!((p[0] - 1.5 * 0.5f64.cos()).abs() < 1e-15);
        assert!((p[1] - 1.2 * 0.5f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn phi_examples() {
        let spec = SafetySpec::new(3, vec![Constraint::Affine { a: vec![1.0, 0.0, 2.0], b: 4.0 }]).unwrap();
        assert_eq!(spec.phi_weights(&[]).unwrap(), vec![1.25, 1.0, 1.5]);

        let row = Constraint::Affine { a: vec![1.0, 0.0], b: 2.0 };
        let spec = SafetySpec::new(2, vec![row.clone(), row]).unwrap();
        assert_eq!(spec.phi_weights(&[]).unwrap(), vec![2.25, 1.0]);
    }

    #[test]
    fn phi_rejects_zero_offset() {
        let spec = SafetySpec {
            state_dim: 2,
            constraints: vec![Constraint::Affine { a: vec![1.0, 0.0], b: 0.0 }],
        };
        assert!(matches!(spec.phi_weights(&[]), Err(Error::SpecNormalization { row: 0 })));
    }

    #[test]
    fn phi_distance_rows_average_gradients() {
        let spec = obstacle_spec();
        // Gradient magnitudes along x: 1 and 0.6, average 0.8; along y: 0 and 0.8.
        let samples = vec![(vec![2.0, 0.0], 0), (vec![3.0, 4.0], 0)];
        let phi = spec.phi_weights(&samples).unwrap();
        assert!((phi[0] - (0.8 / 0.5 + 1.0)).abs() < 1e-12);
        assert!((phi[1] - (0.4 / 0.5 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_closed_form() {
        let spec = SafetySpec::new(
            2,
            vec![
                Constraint::Affine { a: vec![0.5, -1.0], b: 1.0 },
                Constraint::PointDistance {
                    position: vec![0, 1],
                    obstacle: Obstacle::Static { position: vec![0.3, -0.2] },
                    d_safe: 0.7,
                },
            ],
        )
        .unwrap();
        let center = vec![0.9, 0.4];
        let radii = vec![0.1, 0.25];
        let mut tape = Tape::new();
        let c = tape.leaf(center.clone());
        let r = tape.leaf(radii.clone());
        let g = spec.g_box_tape(&mut tape, c, r, 0);
        let expected = spec.g_box(&ReachBox::new(center, radii).unwrap(), 0);
        assert_eq!(tape.scalar(g), expected);
    }

    proptest! {
        #[test]
        fn enlarging_radii_never_decreases_g(
            c in proptest::collection::vec(-3.0f64..3.0, 4),
            r in proptest::collection::vec(0.0f64..1.0, 4),
            extra in 0.0f64..1.0,
            dim in 0usize..4,
        ) {
            let spec = SafetySpec::new(4, vec![
                Constraint::Affine { a: vec![1.0, -2.0, 0.0, 0.5], b: 1.0 },
                Constraint::PointDistance {
                    position: vec![0, 3],
                    obstacle: Obstacle::Static { position: vec![0.5, -0.5] },
                    d_safe: 0.8,
                },
            ]).unwrap();
            let small = ReachBox::new(c.clone(), r.clone()).unwrap();
            let mut grown = r;
            grown[dim] += extra;
            let big = ReachBox::new(c, grown).unwrap();
            prop_assert!(spec.g_box(&big, 0) >= spec.g_box(&small, 0));
        }
    }
}
