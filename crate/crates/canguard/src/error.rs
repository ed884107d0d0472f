//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// NaN or infinity detected in a tensor.
    #[error("numerical instability: non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// CSV/record-level problem, carrying the 1-based line number.
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    /// A required CSV column could not be resolved from the header.
    #[error("missing required column: {0}")]
    MissingColumn(String),

    /// Invalid configuration (dimensions, flags, parameter ranges).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset-level problem (empty input, class too small, bad manifest).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization problems (version, corruption, hash).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Operation requested on a model that does not support it.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code class for the CLI: 2 for data problems,
    /// 3 for numerical instability, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Record { .. }
            | Error::MissingColumn(_)
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
