use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; `key` is the dotted path of the offending field.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Malformed, missing or inconsistent input data.
    #[error("data error{}: {message}", path.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    Data {
        path: Option<PathBuf>,
        message: String,
    },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or other numerical breakdown.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// Caller passed arrays whose shapes do not fit together.
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<Option<PathBuf>>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data { .. } | Error::Io { .. } | Error::Shape(_) => 3,
            Error::Numerical(_) => 4,
        }
    }

    /// Short machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Data { .. } => "data",
            Error::Io { .. } => "io",
            Error::Numerical(_) => "numerical",
            Error::Shape(_) => "shape",
        }
    }
}
