//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the failure categories surfaced by the CLI: argument
/// and validation problems, malformed input files, insufficient shadow-model
/// coverage, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A data file could not be parsed. Rows are 1-based.
    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    /// Parsed data violated a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Not enough in/out shadow models to fit the attack distributions.
    #[error("coverage error: {message} (samples: {samples:?})")]
    Coverage { message: String, samples: Vec<usize> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
