use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// The variants line up with the process exit codes used by the CLI, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input values (shapes, label ranges, tap specs).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A loss component or parameter went non-finite.
    #[error("numeric failure: {component} is not finite ({value})")]
    Numeric { component: String, value: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Validation(_) => 3,
            Error::Numeric { .. } => 4,
            Error::Io { .. } | Error::Tensor(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
