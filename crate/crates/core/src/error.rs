use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BmimError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint schema version {found} does not match supported version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BmimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BmimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            BmimError::Config(_) => 2,
            BmimError::Data(_) | BmimError::Parse { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BmimError>;
