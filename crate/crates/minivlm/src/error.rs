//! Error type shared by all modules.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape disagreement, named by the operation that detected it.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or argument value.
    #[error("config error: {0}")]
    Config(String),

    /// Bad or inconsistent input data (corpus, labels, masks).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents (checkpoint, JSONL, PPM).
    #[error("format error: {0}")]
    Format(String),

    /// Numeric failure such as a NaN loss.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Operation invoked in a state that does not allow it
    /// (e.g. a second backward pass without resetting gradients).
    #[error("invalid state: {0}")]
    State(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
