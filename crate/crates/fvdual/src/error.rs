use thiserror::Error;

/// Errors raised by model construction and the dual runners.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("horizon {horizon} outside the Feynman-Kac window t < ln2/s = {limit}")]
    Window { horizon: f64, limit: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("conditioning on an event of probability zero: {0}")]
    NullConditioning(String),
    #[error("replica aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;
