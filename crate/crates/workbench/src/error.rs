use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WbError {
    #[error(transparent)]
    Core(#[from] sdcw_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    /// Bad experiment configuration or command-line value.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or unsupported model file.
    #[error("model file: {0}")]
    Format(String),
    /// Unreadable or inconsistent dataset.
    #[error("input: {0}")]
    Input(String),
    #[error("{0} is locked by another experiment")]
    Locked(PathBuf),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl WbError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::Config(message.into())
    }

    /// Process exit status: 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            WbError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type WbResult<T> = Result<T, WbError>;
