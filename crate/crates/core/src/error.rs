use thiserror::Error;

/// Errors raised by the inference library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trajectory diverged at leapfrog step {step}")]
    Divergence { step: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("{divergent} of {total} samples diverged (limit is 1%)")]
    TooManyDivergent { divergent: usize, total: usize },

    #[error("non-finite gradient entry in `{0}`")]
    NonFiniteGradient(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParam { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
