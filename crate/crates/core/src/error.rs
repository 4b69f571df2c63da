use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("enumeration too large: {count} sequences exceeds cap {cap}")]
    EnumerationTooLarge { count: u128, cap: u64 },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("q-weighted estimator requires a Q table")]
    MissingQTable,

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
