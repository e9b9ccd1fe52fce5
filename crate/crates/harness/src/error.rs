use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] mvacon_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },
    #[error("{0}")]
    Usage(String),
}

pub type Result<V> = std::result::Result<V, HarnessError>;

pub(crate) trait IoContext<V> {
    fn at(self, path: impl Into<PathBuf>) -> Result<V>;
}

impl<V> IoContext<V> for std::io::Result<V> {
    fn at(self, path: impl Into<PathBuf>) -> Result<V> {
        self.map_err(|source| HarnessError::Io {
            path: path.into(),
            source,
        })
    }
}
