use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PulmoError>;

/// Every failure the pipeline can report.
///
/// The variant names double as the machine-readable `kind` printed by the CLI.
#[derive(Debug, Error)]
pub enum PulmoError {
    #[error("dimension error on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: String,
        actual: String,
    },

    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("ingestion error at row {row}: {detail}")]
    Ingestion { row: usize, detail: String },

    #[error("training error in layer {layer}: {detail}")]
    Training { layer: String, detail: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<PulmoError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PulmoError {
    pub fn dim(axis: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        PulmoError::Dimension {
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        PulmoError::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PulmoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            PulmoError::Dimension { .. } => "dimension",
            PulmoError::Numeric { .. } => "numeric",
            PulmoError::Domain(_) => "domain",
            PulmoError::Config(_) => "config",
            PulmoError::Protocol(_) => "protocol",
            PulmoError::Format(_) => "format",
            PulmoError::Ingestion { .. } => "ingestion",
            PulmoError::Training { .. } => "training",
            PulmoError::Fold { source, .. } => source.kind(),
            PulmoError::Io { .. } => "io",
        }
    }
}
