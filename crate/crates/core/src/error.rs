//! Error taxonomy shared by every module, with the CLI exit-code mapping.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure classes the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up (matmul, backward, optimizer steps).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A scalar argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A config file or flag carries an unusable key or value.
    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    /// A data file does not parse as the container it claims to be.
    #[error("format error in {path} at offset {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// A previously written artifact (checkpoint, snapshot) fails integrity checks.
    #[error("corrupt artifact {path}: {message}")]
    Corrupt { path: String, message: String },

    /// A numeric routine could not produce a finite answer.
    #[error("computation error: {0}")]
    Computation(String),

    /// Filesystem trouble, tagged with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor for I/O failures.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI contract:
    /// 0 ok, 2 config/usage, 3 I/O, 4 corrupt artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Param(_) | Error::Config { .. } | Error::Computation(_) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } | Error::Corrupt { .. } => 4,
        }
    }
}
