use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error in block {block_id}: {message}")]
    Validation { block_id: String, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("augmented record {0} reached an evaluation split")]
    Provenance(String),

    #[error("paraphrase hook failed on {source_id}: {message}")]
    Hook { source_id: String, message: String },

    #[error("unsatisfiable balance plan: {0}")]
    UnsatisfiablePlan(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint load failed: {0}")]
    Load(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnsatisfiablePlan(_) => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Validation { .. }
            | Error::Input(_)
            | Error::Provenance(_)
            | Error::Load(_)
            | Error::Image(_) => ErrorKind::Data,
            Error::Shape(_) | Error::Hook { .. } | Error::NonFinite(_) | Error::Io { .. } => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
