use std::path::PathBuf;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes of two operands are incompatible.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An index, width, or parameter lies outside its admissible range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A configuration value or combination is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// A numeric failure (non-finite value, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Not enough data to compute the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The requested metric is undefined for this input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file or stream does not parse as the expected format.
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
