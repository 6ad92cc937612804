use thiserror::Error;

/// Errors raised by the discovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in term `{term}` at row {row}")]
    NonFinite { term: String, row: usize },

    #[error("sigma model rejected: {0}")]
    SigmaRejected(String),

    #[error("diffusion estimate {value:e} below divisor guard at index {index}")]
    DivisorGuard { index: usize, value: f64 },

    #[error("degenerate discovery: {0}")]
    DegenerateDiscovery(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
