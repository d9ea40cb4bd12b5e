use thiserror::Error;

use crate::multiindex::MultiIndex;

/// Errors raised across the library.
///
/// `Config` errors map to exit code 2 in the command-line tool, every other
/// variant is a numerical or usage failure and maps to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("moment of degree {degree} for {index} exceeds quadrature exactness {exact}")]
    QuadratureExactness {
        index: MultiIndex,
        degree: u32,
        exact: u32,
    },

    #[error("moment table does not cover {0}")]
    MissingMoment(MultiIndex),

    #[error("Gram-Schmidt produced negative residual {kappa:e} at {index}")]
    NegativeResidual { index: MultiIndex, kappa: f64 },

    #[error("basis element {0} is degenerate")]
    DegenerateIndex(MultiIndex),

    #[error("unknown basis index {0}")]
    UnknownIndex(MultiIndex),

    #[error("interval [{start}, {end}] not contained in [0, {horizon}]")]
    IntervalOutOfRange { start: f64, end: f64, horizon: f64 },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("fixed-point iteration did not converge at step {step} (residual {residual:e})")]
    FixedPoint { step: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidModel(_) | Error::Json(_) => 2,
            _ => 3,
        }
    }
}
