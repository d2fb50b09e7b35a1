//! Crate-wide error type.
//!
//! Variants map one-to-one onto the failure classes the operations promise:
//! I/O, file format, tensor dimension, size preconditions, dataset
//! consistency, checkpoint compatibility, config validation, and the
//! hard NaN abort during training.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format for {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("invalid config: {0}")]
    Validation(String),

    #[error("training aborted: non-finite {term} at iteration {iteration} (diagnostic snapshot: {snapshot})")]
    NanAbort {
        term: String,
        iteration: u64,
        snapshot: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 runtime, 3 NaN abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 1,
            Error::NanAbort { .. } => 3,
            _ => 2,
        }
    }
}
