use std::path::{Path, PathBuf};

use mondeq::MonDeqError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Length(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient for {0}; step skipped")]
    NonFiniteGradient(String),

    #[error("optimizer state does not match the parameters: {0}")]
    StateMismatch(String),

    #[error(transparent)]
    Model(#[from] MonDeqError),
}

impl TrainError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
