//! Crate-wide error type. Variants carry enough context (byte offsets,
//! iteration indices) that a failure in a long experiment is diagnosable
//! from the message alone.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("malformed file at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("optimization failed at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        got: got.into(),
    }
}
