//! Conformal calibration of surrogate rollouts and the learned radius model.

mod split;
mod uncertainty;

pub use split::{
    abs_errors, calibrate_ts, calibrate_union, optimize_ts_weights, project_simplex, quantile_rank,
    scores_from_errors, split_quantile, step_scores, ts_objective, CalibrationMode, ConformalCalibration,
    ScoreScale, WeightSearch, SCALE_FLOOR, SCALE_PERCENTILE,
};
pub use uncertainty::{conformal_losses, hard_coverage, lambda_update, ConformalLosses, UncertaintyNet};
