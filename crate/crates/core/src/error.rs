use thiserror::Error;

/// Errors raised across the training and verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("loss must be a scalar, got a vector of length {0}")]
    NonScalarLoss(usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),

    #[error("surrogate rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("constraint row {row} has zero offset; shift the constraint so that b != 0")]
    SpecNormalization { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged(_) | Error::SimulationDiverged(_) | Error::RolloutDiverged { .. }
        )
    }
}
