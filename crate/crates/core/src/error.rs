use thiserror::Error;

/// Errors raised by tensor math, geometry, model construction and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("scene generation error: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<V> = std::result::Result<V, Error>;

pub(crate) fn dim_err<V>(msg: impl Into<String>) -> Result<V> {
    Err(Error::Dimension(msg.into()))
}
