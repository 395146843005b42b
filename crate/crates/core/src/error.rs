use std::io;

use thiserror::Error;

/// Errors raised anywhere in the lab. Each variant maps onto one of the CLI
/// exit categories via [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("action access denied: {0}")]
    AccessDenied(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    MissingPrerequisite,
    Numeric,
    Io,
    Contract,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorCategory::Config,
            Error::MissingPrerequisite(_) => ErrorCategory::MissingPrerequisite,
            Error::NonFinite { .. } => ErrorCategory::Numeric,
            Error::Io(_)
            | Error::Csv(_)
            | Error::Format(_)
            | Error::Version { .. }
            | Error::Checksum { .. } => ErrorCategory::Io,
            Error::Shape { .. }
            | Error::NonScalar(_)
            | Error::OutOfRange(_)
            | Error::AccessDenied(_)
            | Error::UnknownParam(_) => ErrorCategory::Contract,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
