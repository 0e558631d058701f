//! Error type shared by every module.
//!
//! The variants map onto process exit codes at the CLI boundary:
//! usage/argument problems (1), data/format problems (2), and numeric
//! failures such as a NaN loss (3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed an argument outside the documented domain.
    #[error("usage: {0}")]
    Usage(String),
    /// A file exists but its contents are malformed.
    #[error("format: {0}")]
    Format(String),
    /// A file is well-formed but uses a feature we do not handle.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// Input data violates a pipeline precondition (missing file, empty
    /// manifest, too-short signal, mismatched pair, ...).
    #[error("data: {0}")]
    Data(String),
    /// A numeric invariant was violated (NaN/Inf in a tensor or loss).
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Format(_) | Error::Unsupported(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
