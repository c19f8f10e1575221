use std::fmt;

use thiserror::Error;

use crate::data::idx::IdxError;
use crate::harness::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named primitive.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model spec does not compose: {0}")]
    Spec(String),

    #[error("schedule/state mismatch: {0}")]
    Schedule(String),

    #[error("missing auxiliary input: {0}")]
    MissingAux(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config: {0}")]
    Config(String),

    /// A dataset file is absent or unreadable as configured.
    #[error("data: {0}")]
    Data(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse machine-readable failure class, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Shape,
    Argument,
    Data,
    Checkpoint,
    Config,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Argument => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Checkpoint => 5,
            ErrorCategory::Shape => 6,
            ErrorCategory::Numeric => 7,
            ErrorCategory::Io => 8,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Shape => "shape",
            ErrorCategory::Argument => "argument",
            ErrorCategory::Data => "data",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Config => "config",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape { .. } => ErrorCategory::Shape,
            Error::InvalidArgument(_)
            | Error::Spec(_)
            | Error::Schedule(_)
            | Error::MissingAux(_) => ErrorCategory::Argument,
            Error::NonFinite(_) => ErrorCategory::Numeric,
            Error::Idx(_) | Error::Data(_) => ErrorCategory::Data,
            Error::Checkpoint(_) => ErrorCategory::Checkpoint,
            Error::Config(_) => ErrorCategory::Config,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}
