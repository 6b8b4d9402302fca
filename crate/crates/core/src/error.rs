use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    Numerical(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input")]
    EmptyInput,

    #[error("zero variance: {0}")]
    DegenerateVariance(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label out of range at line {line}, dimension {dim}: {message}")]
    Schema { line: usize, dim: String, message: String },

    #[error("no embedding for text `{text_id}`")]
    Join { text_id: String },

    #[error("non-finite density in dimension {dim} at probe value {v}")]
    NonFiniteDensity { dim: usize, v: f64 },

    #[error("validation NLL diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("split fingerprint mismatch: statistics were computed on a different training split")]
    Fingerprint,

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Broad category, used by the CLI to choose an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Optimizer(_) => ErrorCategory::Config,
            Error::Numerical(_) | Error::NonFiniteDensity { .. } | Error::Divergence { .. } | Error::DegenerateVariance(_) => {
                ErrorCategory::Numerical
            }
            Error::EmptyBatch
            | Error::EmptyInput
            | Error::Parse { .. }
            | Error::Schema { .. }
            | Error::Join { .. }
            | Error::Fingerprint
            | Error::Io(_) => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}
