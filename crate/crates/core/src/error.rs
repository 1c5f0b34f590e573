use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's shape contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is malformed (bad permutation, non-scalar loss, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// A forward op produced NaN or infinity.
    #[error("non-finite value produced by `{op}` at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Malformed binary container or checkpoint.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Invalid configuration (unknown key, incompatible shapes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
