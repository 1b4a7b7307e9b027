use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] repq::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{stage} training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        stage: String,
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems are usage errors; everything else is a run failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, TrainError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;
