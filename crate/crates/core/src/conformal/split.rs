//! Split conformal calibration of trajectory prediction errors.
//!
//! Scores are per-step, per-dimension-normalised max-norm errors. Two
//! trajectory-level calibrations are provided: a union bound over per-step
//! split quantiles at level `α/K`, and a weighted time-series score
//! `max_t w_t s_t` with a single quantile.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Percentile of absolute errors used for score scales.
pub const SCALE_PERCENTILE: f64 = 0.9;
pub const SCALE_FLOOR: f64 = 1e-6;

/// 1-based rank `⌈(n+1)(1−α)⌉` of the conformal quantile, or `None` when it
/// exceeds `n` (the quantile is then infinite).
pub fn quantile_rank(n: usize, alpha: f64) -> Option<usize> {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    // Guard against products like 900 * 0.9 landing just above an integer.
    let k = (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize;
    (k <= n).then_some(k)
}

/// The `⌈(n+1)(1−α)⌉`-th smallest score, `+∞` when that rank exceeds `n`.
pub fn split_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("no calibration scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha {alpha} outside (0, 1)")));
    }
    match quantile_rank(scores.len(), alpha) {
        None => Ok(f64::INFINITY),
        Some(k) => Ok(kth_smallest(scores, k)),
    }
}

fn kth_smallest(scores: &[f64], k: usize) -> f64 {
    let mut v = scores.to_vec();
    let (_, x, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *x
}

/// Per-step, per-dimension normalisers `rho[t][j] > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub rho: Vec<Vec<f64>>,
}

impl ScoreScale {
    /// 90th percentile of finite absolute errors per step and dimension,
    /// floored at `SCALE_FLOOR`; `errors[i][t][j]` is trajectory `i`.
    pub fn from_errors(errors: &[Vec<Vec<f64>>]) -> Result<Self> {
        let first = errors
            .first()
            .ok_or_else(|| Error::Contract("no trajectories for score scales".into()))?;
        let (horizon, dim) = (first.len(), first.first().map_or(0, Vec::len));
        let mut rho = vec![vec![SCALE_FLOOR; dim]; horizon];
        for (t, row) in rho.iter_mut().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                let mut column: Vec<f64> = errors
                    .iter()
                    .map(|e| e[t][j])
                    .filter(|x| x.is_finite())
                    .collect();
                if column.is_empty() {
                    *r = 1.0;
                    continue;
                }
                column.sort_by(f64::total_cmp);
                let idx = ((column.len() as f64 * SCALE_PERCENTILE).ceil() as usize).clamp(1, column.len());
                *r = column[idx - 1].max(SCALE_FLOOR);
            }
        }
        Ok(Self { rho })
    }

    pub fn horizon(&self) -> usize {
        self.rho.len()
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            rho: self.rho[..k.min(self.rho.len())].to_vec(),
        }
    }
}

/// Absolute per-step errors, `+∞` where either value is not finite.
pub fn abs_errors(truth: &[Vec<f64>], predicted: &[Vec<f64>]) -> Vec<Vec<f64>> {
    truth
        .iter()
        .zip(predicted)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let e = (x - y).abs();
                    if e.is_finite() {
                        e
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect()
}

/// `s_t = max_{j ∈ dims} |true_{t,j} − pred_{t,j}| / rho_{t,j}`.
pub fn step_scores(truth: &[Vec<f64>], predicted: &[Vec<f64>], scale: &ScoreScale, dims: &[usize]) -> Vec<f64> {
    scores_from_errors(&abs_errors(truth, predicted), scale, dims)
}

pub fn scores_from_errors(errors: &[Vec<f64>], scale: &ScoreScale, dims: &[usize]) -> Vec<f64> {
    errors
        .iter()
        .zip(&scale.rho)
        .map(|(e, rho)| dims.iter().map(|&j| e[j] / rho[j]).fold(0.0, f64::max))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Union,
    Ts,
}

impl CalibrationMode {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationMode::Union => "union",
            CalibrationMode::Ts => "ts",
        }
    }
}

/// Calibrated per-step box radii for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub mode: CalibrationMode,
    pub alpha: f64,
    pub horizon: usize,
    /// `radii[t][j]` for steps `1..=horizon`; zero outside the scored dims.
    pub radii: Vec<Vec<f64>>,
    /// Union mode: per-step quantiles. Time-series mode: empty.
    pub step_quantiles: Vec<f64>,
    /// Time-series mode: simplex weights and the trajectory quantile.
    pub weights: Option<Vec<f64>>,
    pub quantile: Option<f64>,
    /// False when some radius is infinite because calibration data was short.
    pub feasible: bool,
}

fn radii_from(multipliers: &[f64], scale: &ScoreScale, dims: &[usize]) -> Vec<Vec<f64>> {
    multipliers
        .iter()
        .zip(&scale.rho)
        .map(|(&m, rho)| {
            let mut r = vec![0.0; rho.len()];
            for &j in dims {
                r[j] = m * rho[j];
            }
            r
        })
        .collect()
}

/// Per-step split quantiles at level `α/K`; `scores[i][t]` for trajectory `i`.
pub fn calibrate_union(scores: &[Vec<f64>], alpha: f64, scale: &ScoreScale, dims: &[usize]) -> Result<ConformalCalibration> {
    let horizon = scale.horizon();
    if horizon == 0 || scores.iter().any(|s| s.len() < horizon) {
        return Err(Error::Contract("score rows shorter than the horizon".into()));
    }
    let level = alpha / horizon as f64;
    let step_quantiles = (0..horizon)
        .map(|t| {
            let column: Vec<f64> = scores.iter().map(|s| s[t]).collect();
            split_quantile(&column, level)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConformalCalibration {
        mode: CalibrationMode::Union,
        alpha,
        horizon,
        radii: radii_from(&step_quantiles, scale, dims),
        feasible: step_quantiles.iter().all(|q| q.is_finite()),
        step_quantiles,
        weights: None,
        quantile: None,
    })
}

/// `max_t v_t s_t` over steps with positive weight.
fn weighted_score(scores: &[f64], weights: &[f64]) -> f64 {
    scores
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| w * s)
        .fold(0.0, f64::max)
}

fn peak_normalised(weights: &[f64]) -> Vec<f64> {
    let peak = weights.iter().cloned().fold(0.0, f64::max);
    weights.iter().map(|w| w / peak).collect()
}

/// Time-series calibration with fixed weights `w` on the simplex.
///
/// Internally the weights are rescaled to peak 1, which leaves the regions
/// unchanged and makes uniform weights reproduce the plain split quantile of
/// `max_t s_t` exactly.
pub fn calibrate_ts(
    scores: &[Vec<f64>],
    weights: &[f64],
    alpha: f64,
    scale: &ScoreScale,
    dims: &[usize],
) -> Result<ConformalCalibration> {
    let horizon = scale.horizon();
    if weights.len() != horizon || scores.iter().any(|s| s.len() < horizon) {
        return Err(Error::Contract("weights, scores and scales disagree on the horizon".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|w| *w == 0.0) {
        return Err(Error::Contract("time-series weights must be non-negative and not all zero".into()));
    }
    let v = peak_normalised(weights);
    let traj: Vec<f64> = scores.iter().map(|s| weighted_score(&s[..horizon], &v)).collect();
    let q = split_quantile(&traj, alpha)?;
    let multipliers: Vec<f64> = v
        .iter()
        .map(|&vt| if vt > 0.0 { q / vt } else { f64::INFINITY })
        .collect();
    let total: f64 = weights.iter().sum();
    let peak = weights.iter().cloned().fold(0.0, f64::max);
    Ok(ConformalCalibration {
        mode: CalibrationMode::Ts,
        alpha,
        horizon,
        radii: radii_from(&multipliers, scale, dims),
        step_quantiles: Vec::new(),
        feasible: multipliers.iter().all(|m| m.is_finite()),
        weights: Some(weights.iter().map(|w| w / total).collect()),
        quantile: Some(q * peak / total),
    })
}

/// Empirical `(1−α)` conformal quantile of `max_t w_t s_t`.
pub fn ts_objective(scores: &[Vec<f64>], weights: &[f64], alpha: f64) -> f64 {
    let traj: Vec<f64> = scores.iter().map(|s| weighted_score(s, weights)).collect();
    split_quantile(&traj, alpha).unwrap_or(f64::INFINITY)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        cumulative += x;
        let t = (cumulative - 1.0) / (i as f64 + 1.0);
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch {
    pub restarts: usize,
    pub iterations: usize,
}

impl Default for WeightSearch {
    fn default() -> Self {
        Self {
            restarts: 8,
            iterations: 200,
        }
    }
}

/// Simplex weights approximately minimising [`ts_objective`] by projected
/// subgradient descent from the uniform point and random restarts. The
/// result is never worse than uniform on `scores`.
pub fn optimize_ts_weights<R: Rng + ?Sized>(
    scores: &[Vec<f64>],
    horizon: usize,
    alpha: f64,
    search: WeightSearch,
    rng: &mut R,
) -> Vec<f64> {
    if horizon <= 1 {
        return vec![1.0; horizon];
    }
    let scores: Vec<Vec<f64>> = scores.iter().map(|s| s[..horizon].to_vec()).collect();
    let uniform = vec![1.0 / horizon as f64; horizon];
    let mut best = uniform.clone();
    let mut best_value = ts_objective(&scores, &best, alpha);
    let rank = match quantile_rank(scores.len(), alpha) {
        Some(k) if !scores.is_empty() => k,
        _ => return best,
    };
    let base_step = 0.5 / horizon as f64;
    for restart in 0..=search.restarts {
        let mut w = if restart == 0 {
            uniform.clone()
        } else {
            let raw: Vec<f64> = (0..horizon)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        };
        for it in 0..search.iterations {
            let traj: Vec<f64> = scores.iter().map(|s| weighted_score(s, &w)).collect();
            let mut order: Vec<usize> = (0..traj.len()).collect();
            order.sort_by(|&a, &b| traj[a].total_cmp(&traj[b]).then(a.cmp(&b)));
            let critical = order[rank - 1];
            let value = traj[critical];
            if value < best_value {
                best_value = value;
                best = w.clone();
            }
            if !value.is_finite() {
                break;
            }
            let s = &scores[critical];
            let t_star = (0..horizon)
                .max_by(|&a, &b| (w[a] * s[a]).total_cmp(&(w[b] * s[b])).then(b.cmp(&a)))
                .expect("non-empty horizon");
            if s[t_star] == 0.0 {
                break;
            }
            let step = base_step / ((it + 1) as f64).sqrt();
            let mut trial = w.clone();
            trial[t_star] -= step;
            w = project_simplex(&trial);
        }
        let value = ts_objective(&scores, &w, alpha);
        if value < best_value {
            best_value = value;
            best = w;
        }
    }
    best
}
