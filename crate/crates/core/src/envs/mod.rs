//! Benchmark control environments: cart-pole, lane following, planar and
//! spatial quadrotors, and a planar quadrotor avoiding an orbiting obstacle.
//!
//! Every environment integrates its ODE with explicit Euler at a fixed `dt`
//! (`s' = s + dt·f(s, a)`). Actions are normalised to `[−1, 1]` per dimension
//! and mapped to actuator commands by the physics parameters. Costs are
//! derived from the environment's [`SafetySpec`], so `cost = 1` exactly when
//! some row of `h(s')` is positive.

mod bicycle;
mod cartpole;
mod quad2d;
mod quad3d;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use bicycle::BicycleParams;
pub use cartpole::CartPoleParams;
pub use quad2d::PlanarQuadParams;
pub use quad3d::{rotation, SpatialQuadParams};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::safety::{Constraint, Obstacle, SafetySpec};

/// Below this distance a compass direction is replaced by `(1, 0, …)`.
const DIRECTION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Cartpole,
    Lanefollow,
    Quad2d,
    Quad3d,
    Quad2dNl,
}

impl EnvKind {
    pub const ALL: [EnvKind; 5] = [
        EnvKind::Cartpole,
        EnvKind::Lanefollow,
        EnvKind::Quad2d,
        EnvKind::Quad3d,
        EnvKind::Quad2dNl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Cartpole => "cartpole",
            EnvKind::Lanefollow => "lanefollow",
            EnvKind::Quad2d => "quad2d",
            EnvKind::Quad3d => "quad3d",
            EnvKind::Quad2dNl => "quad2d_nl",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Physics {
    Cartpole(CartPoleParams),
    Bicycle(BicycleParams),
    PlanarQuad(PlanarQuadParams),
    SpatialQuad(SpatialQuadParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hazard {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Obstacle moving on `center + (rx·cos(rate·t), ry·sin(rate·t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingObstacle {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub rate: f64,
    pub d_safe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Navigation {
    pub goal: Vec<f64>,
    pub goal_radius: f64,
    pub goal_bonus: f64,
    pub hazards: Vec<Hazard>,
    pub hazard_buffer: f64,
    pub moving_obstacle: Option<MovingObstacle>,
}

impl Navigation {
    /// Keep-out distance shared by all static hazards.
    pub fn hazard_clearance(&self) -> f64 {
        self.hazards.iter().map(|h| h.radius).fold(0.0, f64::max) + self.hazard_buffer
    }

    fn obstacle(&self) -> Option<Obstacle> {
        self.moving_obstacle.as_ref().map(|m| Obstacle::Orbit {
            center: m.center,
            radii: m.radii,
            rate: m.rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dt: f64,
    pub episode_cap: usize,
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
    pub terminate_on_violation: bool,
    pub physics: Physics,
    pub navigation: Option<Navigation>,
}

impl EnvConfig {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Cartpole => Self {
                dt: 0.05,
                episode_cap: 500,
                init_low: vec![-0.05; 4],
                init_high: vec![0.05; 4],
                terminate_on_violation: true,
                physics: Physics::Cartpole(CartPoleParams::default()),
                navigation: None,
            },
            EnvKind::Lanefollow => Self {
                dt: 0.05,
                episode_cap: 500,
                init_low: vec![-0.35, -PI / 8.0, 2.4],
                init_high: vec![0.35, PI / 8.0, 3.6],
                terminate_on_violation: true,
                physics: Physics::Bicycle(BicycleParams::default()),
                navigation: None,
            },
            EnvKind::Quad2d | EnvKind::Quad2dNl => {
                let nl = kind == EnvKind::Quad2dNl;
                Self {
                    dt: 0.02,
                    episode_cap: 400,
                    init_low: vec![-4.75, 1.75, 0.0, 0.0, 0.0, 0.0],
                    init_high: vec![-4.25, 2.25, 0.0, 0.0, 0.0, 0.0],
                    terminate_on_violation: true,
                    physics: Physics::PlanarQuad(PlanarQuadParams::default()),
                    navigation: Some(Navigation {
                        goal: vec![5.0, -1.5],
                        goal_radius: 0.3,
                        goal_bonus: 10.0,
                        hazards: if nl {
                            Vec::new()
                        } else {
                            vec![
                                Hazard { center: vec![-1.5, 1.0], radius: 0.8 },
                                Hazard { center: vec![1.0, -0.5], radius: 0.8 },
                                Hazard { center: vec![3.0, 0.8], radius: 0.8 },
                            ]
                        },
                        hazard_buffer: 0.1,
                        moving_obstacle: nl.then_some(MovingObstacle {
                            center: [0.0, 0.0],
                            radii: [1.5, 1.2],
                            rate: 0.05,
                            d_safe: 0.5,
                        }),
                    }),
                }
            }
            EnvKind::Quad3d => Self {
                dt: 0.02,
                episode_cap: 400,
                init_low: vec![-4.75, -2.25, 0.75, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                init_high: vec![-4.25, -1.75, 1.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                terminate_on_violation: true,
                physics: Physics::SpatialQuad(SpatialQuadParams::default()),
                navigation: Some(Navigation {
                    goal: vec![4.5, 4.5, 3.0],
                    goal_radius: 0.4,
                    goal_bonus: 50.0,
                    hazards: vec![
                        Hazard { center: vec![-1.0, 0.0, 1.5], radius: 1.0 },
                        Hazard { center: vec![1.5, 1.5, 2.0], radius: 1.0 },
                        Hazard { center: vec![3.0, 3.0, 2.5], radius: 1.0 },
                    ],
                    hazard_buffer: 0.1,
                    moving_obstacle: None,
                }),
            },
        }
    }
}

/// Environment state plus the number of steps elapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub state: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub observation: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub reached_goal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    kind: EnvKind,
    config: EnvConfig,
    spec: SafetySpec,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        Self::with_config(kind, EnvConfig::default_for(kind)).expect("built-in config is valid")
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn with_config(kind: EnvKind, config: EnvConfig) -> Result<Self> {
        let state_dim = match &config.physics {
            Physics::Cartpole(_) => 4,
            Physics::Bicycle(_) => 3,
            Physics::PlanarQuad(_) => 6,
            Physics::SpatialQuad(_) => 12,
        };
        let expected_physics = match kind {
            EnvKind::Cartpole => matches!(config.physics, Physics::Cartpole(_)),
            EnvKind::Lanefollow => matches!(config.physics, Physics::Bicycle(_)),
            EnvKind::Quad2d | EnvKind::Quad2dNl => matches!(config.physics, Physics::PlanarQuad(_)),
            EnvKind::Quad3d => matches!(config.physics, Physics::SpatialQuad(_)),
        };
        if !expected_physics {
            return Err(Error::Config(format!("physics model does not match environment {kind}")));
        }
        if !(config.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if config.init_low.len() != state_dim
            || config.init_high.len() != state_dim
            || config.init_low.iter().zip(&config.init_high).any(|(l, h)| l > h)
        {
            return Err(Error::Config("initial region does not match the state".into()));
        }
        if let Some(nav) = &config.navigation {
            if nav.hazards.iter().any(|h| h.radius <= 0.0) {
                return Err(Error::Config("hazard radii must be positive".into()));
            }
            let pos_dim = if state_dim == 12 { 3 } else { 2 };
            if nav.goal.len() != pos_dim || nav.hazards.iter().any(|h| h.center.len() != pos_dim) {
                return Err(Error::Config("goal/hazard dimension mismatch".into()));
            }
        }
        let spec = build_spec(state_dim, &config)?;
        Ok(Self { kind, config, spec })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn spec(&self) -> &SafetySpec {
        &self.spec
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn action_dim(&self) -> usize {
        match self.config.physics {
            Physics::Cartpole(_) => 1,
            Physics::Bicycle(_) | Physics::PlanarQuad(_) => 2,
            Physics::SpatialQuad(_) => 4,
        }
    }

    fn position_dim(&self) -> usize {
        if self.state_dim() == 12 {
            3
        } else {
            2
        }
    }

    pub fn obs_dim(&self) -> usize {
        let n = self.state_dim();
        match &self.config.navigation {
            None => n,
            Some(nav) => {
                let p = self.position_dim();
                if nav.moving_obstacle.is_some() {
                    n + p + 1 + 2
                } else {
                    n + 2 * (p + 1)
                }
            }
        }
    }

    /// Step-indexed angle of the moving obstacle, in `[0, 2π)`.
    pub fn obstacle_phase(&self, step: usize) -> Option<f64> {
        let nav = self.config.navigation.as_ref()?;
        let m = nav.moving_obstacle.as_ref()?;
        Some((m.rate * step as f64).rem_euclid(2.0 * PI))
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let state = self
            .config
            .init_low
            .iter()
            .zip(&self.config.init_high)
            .map(|(&lo, &hi)| if lo == hi { lo } else { rng.random_range(lo..=hi) })
            .collect();
        EnvState { state, step: 0 }
    }

    /// ODE right-hand side `ṡ = f(s, a)`.
    pub fn derivatives(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        match &self.config.physics {
            Physics::Cartpole(p) => p.derivatives(state, action),
            Physics::Bicycle(p) => p.derivatives(state, action),
            Physics::PlanarQuad(p) => p.derivatives(state, action),
            Physics::SpatialQuad(p) => p.derivatives(state, action),
        }
    }

    /// One Euler step of the raw dynamics, without rewards or termination.
    pub fn transition(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let d = self.derivatives(state, action);
        state.iter().zip(&d).map(|(s, ds)| s + self.config.dt * ds).collect()
    }

    pub fn step(&self, current: &EnvState, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.action_dim() {
            return Err(Error::InputShape {
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        let action: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let next = self.transition(&current.state, &action);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::SimulationDiverged(format!(
                "{} produced a non-finite state at step {}",
                self.kind, current.step
            )));
        }
        let next_state = EnvState {
            state: next,
            step: current.step + 1,
        };
        let (reward, cost, reached_goal) = self.reward_cost(current, &action, &next_state);
        let terminated = (cost > 0.0 && self.config.terminate_on_violation) || reached_goal;
        let truncated = !terminated && next_state.step >= self.config.episode_cap;
        let observation = self.observe(&next_state.state, next_state.step);
        Ok(StepResult {
            next_state,
            observation,
            reward,
            cost,
            terminated,
            truncated,
            reached_goal,
        })
    }

    /// Reward, binary cost and goal flag for the transition `current → next`.
    pub fn reward_cost(&self, current: &EnvState, action: &[f64], next: &EnvState) -> (f64, f64, bool) {
        let cost = if self.spec.is_safe_state(&next.state, next.step) {
            0.0
        } else {
            1.0
        };
        let effort: f64 = action.iter().map(|a| a * a).sum();
        match &self.config.physics {
            Physics::Cartpole(_) => (if cost == 0.0 { 1.0 } else { 0.0 }, cost, false),
            Physics::Bicycle(p) => (p.reward(&next.state), cost, false),
            Physics::PlanarQuad(p) => {
                let nav = self.config.navigation.as_ref().expect("quadrotors navigate");
                let before = goal_distance(&current.state[..2], &nav.goal);
                let after = goal_distance(&next.state[..2], &nav.goal);
                let reached = after <= nav.goal_radius;
                let tilt = if next.state[2].abs() > p.tilt_threshold {
                    p.tilt_penalty
                } else {
                    0.0
                };
                let mut r = (before - after) - p.effort_penalty * effort - tilt;
                if reached {
                    r += nav.goal_bonus;
                }
                (r, cost, reached)
            }
            Physics::SpatialQuad(p) => {
                let nav = self.config.navigation.as_ref().expect("quadrotors navigate");
                let before = goal_distance(&current.state[..3], &nav.goal);
                let after = goal_distance(&next.state[..3], &nav.goal);
                let reached = after <= nav.goal_radius;
                let (phi, theta) = (next.state[3], next.state[4]);
                let mut r = (before - after)
                    - p.effort_penalty * effort
                    - p.attitude_penalty * (phi * phi + theta * theta);
                if reached {
                    r += nav.goal_bonus;
                }
                (r, cost, reached)
            }
        }
    }

    /// Policy observation for `state` at step index `step`.
    pub fn observe(&self, state: &[f64], step: usize) -> Vec<f64> {
        let Some(nav) = &self.config.navigation else {
            return state.to_vec();
        };
        let p = self.position_dim();
        let pos = &state[..p];
        let mut obs = state.to_vec();
        let (dir, dist) = compass(pos, &nav.goal);
        obs.extend(dir);
        obs.push(dist);
        if let Some(o) = nav.obstacle() {
            obs.extend(o.position(step));
        } else if let Some(h) = nearest_hazard(pos, &nav.hazards) {
            let (dir, dist) = compass(pos, &h.center);
            obs.extend(dir);
            obs.push(dist);
        }
        obs
    }

    /// Differentiable counterpart of [`Env::observe`].
    pub fn observe_tape(&self, tape: &mut Tape, state: Var, step: usize) -> Var {
        let Some(nav) = &self.config.navigation else {
            return state;
        };
        let p = self.position_dim();
        let pos = tape.slice(state, 0, p);
        let mut parts = vec![state];
        let (dir, dist) = compass_tape(tape, pos, &nav.goal);
        parts.push(dir);
        parts.push(dist);
        if let Some(o) = nav.obstacle() {
            parts.push(tape.leaf(o.position(step)));
        } else {
            let pos_val = tape.value(pos).to_vec();
            if let Some(h) = nearest_hazard(&pos_val, &nav.hazards) {
                let (dir, dist) = compass_tape(tape, pos, &h.center);
                parts.push(dir);
                parts.push(dist);
            }
        }
        tape.concat(&parts)
    }
}

fn goal_distance(pos: &[f64], goal: &[f64]) -> f64 {
    pos.iter().zip(goal).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn unit_x(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

/// Unit vector from `pos` towards `target` and the distance between them.
fn compass(pos: &[f64], target: &[f64]) -> (Vec<f64>, f64) {
    let diff: Vec<f64> = target.iter().zip(pos).map(|(t, p)| t - p).collect();
    let dist = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    if dist < DIRECTION_EPS {
        (unit_x(pos.len()), dist)
    } else {
        (diff.iter().map(|x| x / dist).collect(), dist)
    }
}

fn compass_tape(tape: &mut Tape, pos: Var, target: &[f64]) -> (Var, Var) {
    let neg = tape.neg(pos);
    let diff = tape.add_const(neg, target);
    let dist = tape.norm2(diff);
    if tape.scalar(dist) < DIRECTION_EPS {
        (tape.leaf(unit_x(target.len())), dist)
    } else {
        (tape.div(diff, dist), dist)
    }
}

fn nearest_hazard<'a>(pos: &[f64], hazards: &'a [Hazard]) -> Option<&'a Hazard> {
    hazards.iter().min_by(|a, b| {
        goal_distance(pos, &a.center)
            .partial_cmp(&goal_distance(pos, &b.center))
            .expect("finite distances")
    })
}

fn build_spec(n: usize, config: &EnvConfig) -> Result<SafetySpec> {
    let mut rows = Vec::new();
    let symmetric = |rows: &mut Vec<Constraint>, i: usize, limit: f64| {
        rows.push(Constraint::upper(n, i, 1.0, limit));
        rows.push(Constraint::upper(n, i, -1.0, limit));
    };
    let interval = |rows: &mut Vec<Constraint>, i: usize, lim: [f64; 2]| {
        rows.push(Constraint::upper(n, i, 1.0, lim[1]));
        rows.push(Constraint::upper(n, i, -1.0, -lim[0]));
    };
    match &config.physics {
        Physics::Cartpole(p) => {
            symmetric(&mut rows, 2, p.theta_max);
            symmetric(&mut rows, 0, p.x_max);
        }
        Physics::Bicycle(p) => {
            symmetric(&mut rows, 0, p.d_max);
            symmetric(&mut rows, 1, p.theta_max);
        }
        Physics::PlanarQuad(p) => {
            interval(&mut rows, 0, p.x_limits);
            interval(&mut rows, 1, p.y_limits);
            symmetric(&mut rows, 2, p.theta_max);
        }
        Physics::SpatialQuad(p) => {
            for i in 0..3 {
                symmetric(&mut rows, i, p.position_limit);
            }
            symmetric(&mut rows, 3, p.attitude_max);
            symmetric(&mut rows, 4, p.attitude_max);
        }
    }
    if let Some(nav) = &config.navigation {
        let p = nav.goal.len();
        let clearance = nav.hazard_clearance();
        for h in &nav.hazards {
            rows.push(Constraint::PointDistance {
                position: (0..p).collect(),
                obstacle: Obstacle::Static {
                    position: h.center.clone(),
                },
                d_safe: clearance,
            });
        }
        if let (Some(m), Some(o)) = (&nav.moving_obstacle, nav.obstacle()) {
            rows.push(Constraint::PointDistance {
                position: vec![0, 1],
                obstacle: o,
                d_safe: m.d_safe,
            });
        }
    }
    SafetySpec::new(n, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_round_trip() {
        for k in EnvKind::ALL {
            assert_eq!(k.name().parse::<EnvKind>().unwrap(), k);
        }
        assert!("halfcheetah".parse::<EnvKind>().is_err());
    }

    #[test]
    fn observation_dimensions() {
        let dims: Vec<_> = EnvKind::ALL.iter().map(|&k| Env::new(k).obs_dim()).collect();
        assert_eq!(dims, vec![4, 3, 12, 20, 11]);
        for k in EnvKind::ALL {
            let env = Env::new(k);
            let s = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(env.observe(&s.state, 0).len(), env.obs_dim());
        }
    }

    #[test]
    fn degenerate_region_resets_to_point() {
        let mut cfg = EnvConfig::default_for(EnvKind::Cartpole);
        cfg.init_low = vec![0.0; 4];
        cfg.init_high = vec![0.0; 4];
        let env = Env::with_config(EnvKind::Cartpole, cfg).unwrap();
        assert_eq!(env.reset(&mut ChaCha8Rng::seed_from_u64(5)).state, vec![0.0; 4]);
    }

    #[test]
    fn quad2d_reset_region() {
        let env = Env::new(EnvKind::Quad2d);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let s = env.reset(&mut rng).state;
            assert!((-4.75..=-4.25).contains(&s[0]));
            assert!((1.75..=2.25).contains(&s[1]));
            assert!(s[2..].iter().all(|&x| x == 0.0));
            assert!(env.spec().is_safe_state(&s, 0));
        }
    }

    #[test]
    fn resets_are_safe_everywhere() {
        for k in EnvKind::ALL {
            let env = Env::new(k);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..500 {
                let s = env.reset(&mut rng);
                assert!(env.spec().is_safe_state(&s.state, 0), "{k}");
            }
        }
    }

    #[test]
    fn cartpole_reference_accelerations() {
        let p = CartPoleParams::default();
        let (theta_acc, x_acc) = p.accelerations(&[0.0, 0.0, 0.1, 0.0], 0.0);
        assert!((theta_acc - 1.573785).abs() < 1e-5);
        assert!((x_acc + 0.071178).abs() < 1e-5);
    }

    #[test]
    fn lane_straight_line_is_stationary() {
        let env = Env::new(EnvKind::Lanefollow);
        let s = EnvState { state: vec![0.2, 0.0, 3.0], step: 0 };
        let r = env.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(r.next_state.state, vec![0.2, 0.0, 3.0]);
    }

    #[test]
    fn planar_hover_balances_gravity() {
        let p = PlanarQuadParams::default();
        let d = p.derivatives(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn spatial_hover_balances_gravity() {
        let p = SpatialQuadParams::default();
        let mut s = vec![0.0; 12];
        s[2] = 1.0;
        let d = p.derivatives(&s, &[0.0; 4]);
        assert!(d.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn goal_distance_observation() {
        let env = Env::new(EnvKind::Quad2d);
        let obs = env.observe(&[-4.5, 2.0, 0.0, 0.0, 0.0, 0.0], 0);
        assert!((obs[8] - (9.5f64.powi(2) + 3.5f64.powi(2)).sqrt()).abs() < 1e-12);
        assert!((obs[8] - 10.1242).abs() < 1e-4);
        let at_goal = env.observe(&[5.0, -1.5, 0.0, 0.0, 0.0, 0.0], 0);
        assert_eq!(&at_goal[6..9], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cartpole_observation_is_state() {
        let env = Env::new(EnvKind::Cartpole);
        let s = [0.01, -0.02, 0.03, 0.04];
        assert_eq!(env.observe(&s, 3), s.to_vec());
    }

    #[test]
    fn reward_examples() {
        let env = Env::new(EnvKind::Cartpole);
        let s = EnvState { state: vec![0.0; 4], step: 0 };
        let r = env.step(&s, &[0.0]).unwrap();
        assert_eq!((r.reward, r.cost, r.terminated), (1.0, 0.0, false));

        let env = Env::new(EnvKind::Lanefollow);
        let s = EnvState { state: vec![0.0, 0.0, 3.0], step: 0 };
        let r = env.step(&s, &[0.0, 0.0]).unwrap();
        assert!((r.reward - 0.1).abs() < 1e-15);

        let env = Env::new(EnvKind::Quad3d);
        let mut s = vec![0.0; 12];
        s[..3].copy_from_slice(&[4.5, 4.5, 2.55]);
        s[8] = 10.0;
        let r = env.step(&EnvState { state: s, step: 0 }, &[0.0; 4]).unwrap();
        assert!(r.reached_goal && r.terminated);
        assert!(r.reward > 50.0);
    }

    #[test]
    fn violation_terminates_with_cost() {
        let env = Env::new(EnvKind::Cartpole);
        let s = EnvState { state: vec![0.0, 0.0, 0.199, 1.0], step: 0 };
        let r = env.step(&s, &[0.0]).unwrap();
        assert_eq!(r.cost, 1.0);
        assert_eq!(r.reward, 0.0);
        assert!(r.terminated);
    }

    #[test]
    fn episode_cap_truncates() {
        let env = Env::new(EnvKind::Lanefollow);
        let s = EnvState { state: vec![0.0, 0.0, 3.0], step: 499 };
        let r = env.step(&s, &[0.0, 0.0]).unwrap();
        assert!(r.truncated && !r.terminated);
    }

    #[test]
    fn obstacle_phase_wraps() {
        let env = Env::new(EnvKind::Quad2dNl);
        let ph = env.obstacle_phase(200).unwrap();
        assert!((ph - (10.0 - 2.0 * PI)).abs() < 1e-12);
        assert!(Env::new(EnvKind::Quad2d).obstacle_phase(3).is_none());
    }

    #[test]
    fn tape_observation_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in EnvKind::ALL {
            let env = Env::new(k);
            let mut s = env.reset(&mut rng).state;
            for x in s.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
            let mut tape = Tape::new();
            let v = tape.leaf(s.clone());
            let o = env.observe_tape(&mut tape, v, 17);
            let plain = env.observe(&s, 17);
            for (a, b) in tape.value(o).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-14, "{k}");
            }
        }
    }

    #[test]
    fn mismatched_physics_rejected() {
        let cfg = EnvConfig::default_for(EnvKind::Cartpole);
        assert!(Env::with_config(EnvKind::Quad3d, cfg).is_err());
    }
}
