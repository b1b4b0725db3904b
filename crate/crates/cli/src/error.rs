use std::path::PathBuf;

use sticky_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("{command} ({config}): {source}")]
    Command {
        command: String,
        config: String,
        #[source]
        source: CoreError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Command { source, .. } => match source {
                CoreError::Config(_)
                | CoreError::Domain(_)
                | CoreError::Precondition(_)
                | CoreError::UnsupportedDimension { .. } => 2,
                _ => 3,
            },
            Self::Io { .. } => 3,
        }
    }
}
