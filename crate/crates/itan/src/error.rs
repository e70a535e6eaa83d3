//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by estimators, the detector pipeline, and data loading.
#[derive(Debug, Error)]
pub enum Error {
    /// An input vector contained NaN or infinity.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// A vector or matrix had the wrong dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A configuration value was outside its legal range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A data file could not be parsed; `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },

    /// An error raised while processing a specific stream round (1-based).
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("snapshot: {0}")]
    Snapshot(#[from] serde_json::Error),
}

impl Error {
    /// Attach a 1-based round index to an error bubbling out of a run.
    pub fn at_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
