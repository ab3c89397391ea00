use std::path::{Path, PathBuf};

use thiserror::Error;

/// Everything a subcommand can fail with. [`RunError::exit_code`] maps the
/// variants onto the CLI's 1 (user error) / 2 (runtime error) convention.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] edg_core::Error),
}

impl RunError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        RunError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        use edg_core::Error as E;
        match self {
            RunError::Usage(_)
            | RunError::Config { .. }
            | RunError::Io { .. }
            | RunError::Format { .. } => 1,
            RunError::Core(E::Config(_) | E::Shape(_) | E::Contract(_)) => 1,
            RunError::Core(_) => 2,
        }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;
