use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/model shape or count mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// I/O failure, always carrying the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content (bad magic, truncated payload, bad JSON, ...).
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    /// Data that parsed but violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// API misuse (backward on a non-scalar, reusing a spent tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Runtime failure during training or inference (NaN loss, ...).
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
