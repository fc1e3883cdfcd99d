use std::path::PathBuf;

use l2tww_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{what} at byte offset {offset}: {reason}")]
    Format {
        what: String,
        offset: u64,
        reason: String,
    },
    #[error("unsupported checkpoint version {found} (this build reads version {supported}); migrate the file before loading")]
    CheckpointVersion { found: u16, supported: u16 },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("unknown transfer pair {0}")]
    UnknownPair(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("class {class} has {available} samples, {requested} requested")]
    ClassDeficit {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("non-finite {what} at {location}")]
    NonFinite { what: String, location: String },
    #[error("invalid dataset: {0}")]
    Dataset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
