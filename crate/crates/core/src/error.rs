//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    /// Shape or channel-count disagreement between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input violates a documented precondition (non-finite values,
    /// zero variance, empty dataset, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Dataset-level problem: missing files, split leakage, bad manifest.
    #[error("data error: {0}")]
    Data(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
