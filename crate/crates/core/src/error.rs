use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label file {path}, line {line}: {msg}")]
    LabelFormat {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint format error at {path}: {msg}")]
    CheckpointFormat { path: PathBuf, msg: String },

    #[error("config digest mismatch: expected {expected}, found {found} ({context})")]
    DigestMismatch {
        expected: String,
        found: String,
        context: String,
    },

    #[error("training diverged at pass {pass}, epoch {epoch}, step {step}: {loss} is not finite")]
    Divergence {
        pass: usize,
        epoch: usize,
        step: usize,
        loss: String,
    },

    #[error("run directory {path} is locked by pid {pid}")]
    LockHeld { path: PathBuf, pid: u32 },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// CLI exit status for this error: 3 for environment/lock problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::LockHeld { .. } => 3,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
