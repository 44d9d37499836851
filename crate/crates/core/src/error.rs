use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid time series: {0}")]
    InvalidSeries(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Every state has zero weighted mass at this (1-based) time step.
    #[error("prior is inconsistent with the data at t = {t}")]
    InconsistentPrior { t: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible model: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model library is empty")]
    EmptyLibrary,

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
