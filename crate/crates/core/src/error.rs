use std::path::PathBuf;

use keci_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KeciError {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl KeciError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a defect.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Self::Parse { .. }
                | Self::Validation(_)
                | Self::Format(_)
                | Self::Argument(_)
                | Self::Io { .. }
        )
    }
}

pub type Result<T, E = KeciError> = std::result::Result<T, E>;
