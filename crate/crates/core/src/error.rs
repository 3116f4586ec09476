use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the refinery engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no depth blob with at least {min_area} pixels")]
    NoBlob { min_area: usize },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("engine busy: {0}")]
    Busy(String),

    #[error("unknown command: {0}")]
    UnknownCommand(String),

    #[error("phase failed: {0}")]
    Phase(String),

    #[error("annotation timed out after {0:?}")]
    AnnotationTimeout(std::time::Duration),

    #[error("stale annotation response: expected request {expected:?}, got {got}")]
    StaleResponse { expected: Option<u64>, got: u64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite(_) => "non_finite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Numerical(_) => "numerical",
            Error::NoBlob { .. } => "no_blob",
            Error::Schema { .. } => "schema",
            Error::Io { .. } => "io",
            Error::Busy(_) => "busy",
            Error::UnknownCommand(_) => "unknown_command",
            Error::Phase(_) => "phase",
            Error::AnnotationTimeout(_) => "annotation_timeout",
            Error::StaleResponse { .. } => "stale_response",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
