use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { what: &'static str, expected: u32, found: u32 },

    #[error("truncated {what}: needed {needed} bytes, only {available} available")]
    Truncated { what: String, needed: usize, available: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt checkpoint tensor `{name}`: {detail}")]
    CorruptTensor { name: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by malformed or unreadable input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::DimMismatch(_)
                | Error::UnsupportedVersion(_)
                | Error::CorruptTensor { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
