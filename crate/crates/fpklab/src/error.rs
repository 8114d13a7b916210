//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is out of its documented range.
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: String, reason: String },

    /// Two objects that must share a dimension (or a grid) do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A floating-point quantity became non-finite; `context` names the step.
    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// The model is inconsistent with the particle representation
    /// (e.g. 2a - sigma sigma^T fails to be positive semidefinite).
    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    /// Unknown preset or malformed coefficient spec string.
    #[error("unknown model spec `{0}`")]
    UnknownModel(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failure: {0}")]
    Serialization(String),
}

impl Error {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
