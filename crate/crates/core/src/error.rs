use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the committee library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Cholesky factorization failed at every rung of the jitter ladder.
    #[error("numerical breakdown in {context}: factorization failed with jitters {jitters:?}")]
    NumericalBreakdown { context: String, jitters: Vec<f64> },

    #[error("objective is not finite at the initial point (value {value})")]
    InvalidStart { value: f64 },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("partition has no communication subset")]
    MissingCommunicationSubset,

    #[error("targets are constant; variance is zero")]
    DegenerateTargets,

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },

    #[error("non-numeric cell at row {row}, column {column}: {value:?}")]
    NonNumericCell {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the context of a numerical breakdown, leaving other variants untouched.
    pub(crate) fn in_context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            Error::NumericalBreakdown { context, jitters } => Error::NumericalBreakdown {
                context: format!("{prefix}: {context}"),
                jitters,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
