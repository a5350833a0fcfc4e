use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum MomError {
    #[error("block count must be odd, got {0}")]
    OddBlockCountRequired(usize),

    #[error("cannot split {samples} samples into {blocks} blocks")]
    TooManyBlocks { samples: usize, blocks: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionError { expected: usize, found: usize },

    #[error("median requires an odd-length vector, got length {0}")]
    OddLengthRequired(usize),

    #[error("empty lambda window: 6 * gamma2 = {six_gamma2} exceeds gamma1 = {gamma1}")]
    EmptyLambdaWindow { gamma1: f64, six_gamma2: f64 },

    #[error("iterate became non-finite at restart {restart}, iteration {iteration}; try smaller step sizes")]
    DivergenceError { restart: usize, iteration: usize },

    #[error("grid requires {required} evaluations, cap is {cap}")]
    GridCapExceeded { required: u128, cap: u128 },

    #[error("probe {index} at distance {distance} is outside the regime ({regime})")]
    ProbeOutOfRegime {
        index: usize,
        distance: f64,
        regime: String,
    },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MomError> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(MomError::DimensionError { expected, found })
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> MomError {
    MomError::ConfigError(msg.into())
}
