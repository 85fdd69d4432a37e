use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures reported by the binary container and checkpoint readers.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes, expected {expected}")]
    BadMagic { expected: String },
    #[error("corrupted header: {0}")]
    CorruptHeader(String),
    #[error("unknown signal kind `{0}` in header")]
    UnknownKind(String),
    #[error("truncated payload: header declares {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("checksum mismatch: header {expected}, payload {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing signal {requested}; available: {available}")]
    MissingSignal { requested: String, available: String },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    FormatBytes(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::NonFinite(_) => ErrorCategory::Numerical,
            Error::Shape(_)
            | Error::MissingSignal { .. }
            | Error::Format { .. }
            | Error::FormatBytes(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorCategory::Data,
        }
    }

    /// The underlying format error, if any, regardless of whether a path was attached.
    pub fn format_error(&self) -> Option<&FormatError> {
        match self {
            Error::Format { source, .. } => Some(source),
            Error::FormatBytes(e) => Some(e),
            _ => None,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
