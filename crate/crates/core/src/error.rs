use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; `line` is 1-based.
    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    /// Well-formed data that violates a domain invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("placement failed: need {needed} GPUs but only {available} are free (short by {shortfall})")]
    Placement {
        needed: usize,
        available: usize,
        shortfall: usize,
    },

    /// Failure writing results; not the user's input.
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Output {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, line: usize, message: impl ToString) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            line,
            message: message.to_string(),
        }
    }

    /// Errors caused by user input (bad files, bad parameters) versus
    /// failures while running an otherwise valid configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument(_) | Error::Format { .. } | Error::Io { .. } | Error::Validation(_)
        )
    }
}
