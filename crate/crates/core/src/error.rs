use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied values violate an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("backend failure for item {item_id} sample {index}: {message}")]
    Backend {
        item_id: String,
        index: u32,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure came from a sampling backend rather than from
    /// validation of local inputs.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
