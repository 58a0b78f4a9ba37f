use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::ParamStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint: {0}")]
    Mismatch(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        last_good: Box<ParamStore>,
    },

    #[error("refusing to write into non-empty directory {} (use --force)", .0.display())]
    DirectoryNotEmpty(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Usage(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::EmptyDataset(_)
            | Error::Data(_)
            | Error::Integrity(_)
            | Error::Mismatch(_)
            | Error::Protocol(_)
            | Error::DirectoryNotEmpty(_)
            | Error::Io { .. } => ErrorClass::Data,
            Error::Dimension(_)
            | Error::Shape(_)
            | Error::Domain(_)
            | Error::NonFiniteGradient(_)
            | Error::Diverged { .. } => ErrorClass::Runtime,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 3,
            ErrorClass::Data => 4,
            ErrorClass::Runtime => 5,
        }
    }
}
