//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem-level failure (open, read, write).
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match a supported format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// An operation was called with inputs that violate its preconditions.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A numeric routine hit a degenerate configuration it cannot resolve
    /// (e.g. all posterior mass on a single point).
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Stable process exit code for this error class.
    ///
    /// 2 = i/o or file format, 3 = precondition, 4 = degenerate numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Precondition(_) => 3,
            Error::Degenerate(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
