//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or tensor dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A dataset file is missing or cannot be parsed.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset contents are self-inconsistent (dangling edges, id gaps, ...).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// An operation was configured with invalid parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or a failed numerical routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Ground-truth or input data violates a documented precondition.
    #[error("input error: {0}")]
    Input(String),

    /// The classifier gradients carry no usable embedding signal.
    #[error("leakage unavailable: {0}")]
    LeakageUnavailable(String),

    /// A linear layer cannot be inverted.
    #[error("inversion error: {0}")]
    Inversion(String),

    /// Feature recovery hit an all-zero coefficient matrix with nonzero
    /// gradients; nothing downstream can be solved for.
    #[error("recovery degenerate: {0}")]
    RecoveryDegenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
