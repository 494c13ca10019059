use std::io;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, AppError>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: format error: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] b3d_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 1 for usage and configuration problems, 2 for everything that went
    /// wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => 1,
            AppError::Core(b3d_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
