use std::path::PathBuf;

/// Errors produced anywhere in the sampling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("component error: expected `{expected}`, found `{found}`")]
    Component { expected: String, found: String },
    #[error("insufficient history: need {needed} past maps, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Shape(_) => "shape",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Config(_) => "config",
            Error::Budget(_) => "budget",
            Error::Numeric(_) => "numeric",
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Component { .. } => "component",
            Error::InsufficientHistory { .. } => "insufficient-history",
            Error::Data(_) => "data",
            Error::Training(_) => "training",
            Error::Invariant(_) => "invariant",
            Error::Io { .. } => "io",
        }
    }
}
