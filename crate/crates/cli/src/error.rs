use std::path::{Path, PathBuf};

use thiserror::Error;

/// Everything that can end a command. [`CliError::exit_code`] maps each
/// kind onto the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vmfmix_core::Error),
}

impl CliError {
    /// 2 for numerical failures inside the engine, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(vmfmix_core::Error::Numerical(_))
            | CliError::Core(vmfmix_core::Error::Domain { .. }) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
