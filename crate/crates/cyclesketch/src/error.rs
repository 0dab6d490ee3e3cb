use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

/// Failures of the command line and service, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(cyclesketch_core::Error),
}

impl AppError {
    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        AppError::Format { path: path.into(), message: message.to_string() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Numerical(_) => 4,
            _ => 3,
        }
    }
}

impl From<cyclesketch_core::Error> for AppError {
    fn from(e: cyclesketch_core::Error) -> Self {
        if e.is_numerical() {
            AppError::Numerical(e)
        } else {
            AppError::Input(e.to_string())
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
