use std::io;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, AppError>;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] dolphin_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    /// Malformed file contents.
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    /// A check ran to completion and reported failures.
    #[error("{0}")]
    Failed(String),
}

impl AppError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        AppError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        AppError::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    /// 2 for bad input or configuration, 3 for numeric failures, 4 for IO.
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Core(e) if e.is_numeric() => 3,
            AppError::Failed(_) => 3,
            AppError::Io { .. } => 4,
            AppError::Core(_) | AppError::Format { .. } | AppError::Config(_) => 2,
        }
    }
}
