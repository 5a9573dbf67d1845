use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants group into three categories (see [`Error::category`]) which the
/// CLI and the C ABI map onto exit/status codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bucket scale: {0}")]
    InvalidScale(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("bucket scales differ")]
    ScaleMismatch,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("infeasible moments: mean {mu}, std {sigma} ({reason})")]
    InfeasibleMoments { mu: f64, sigma: f64, reason: String },

    #[error(
        "maxent solver did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: line {line}: {source}")]
    Row {
        path: String,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("example {index}: {source}")]
    AtExample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("setting {setting}: {source}")]
    AtSetting {
        setting: String,
        #[source]
        source: Box<Error>,
    },

    #[error("image {0}")]
    Image(String),

    /// An id present in one input file is missing from another.
    #[error("{path}: no entry for id {id:?}")]
    MissingId { path: String, id: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numerical => "numerical",
        }
    }
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
            Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::NonFinite(_)
            | Error::NoConvergence { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Degenerate(_) => ErrorCategory::Numerical,
            Error::Row { source, .. }
            | Error::AtExample { source, .. }
            | Error::AtSetting { source, .. } => match source.category() {
                ErrorCategory::Usage => ErrorCategory::Data,
                c => c,
            },
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
