use std::path::PathBuf;

use thiserror::Error;

use crate::data_model::archive::ArchiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid interval [{start}, {end}]")]
    InvalidInterval { start: f64, end: f64 },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("dangling archive key `{0}`")]
    DanglingKey(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("missing feature `{0}`")]
    MissingFeature(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called without a matching forward record: {0}")]
    StaleForward(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("query `{0}` missing from predictions")]
    MissingQuery(String),

    #[error("every sweep configuration failed")]
    SweepFailed,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
