use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Toolkit-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("manifest integrity violation: {0}")]
    Integrity(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("worker protocol error for patch {patch_id}: {message}")]
    Protocol { patch_id: String, message: String },

    #[error("detector run failed; unprocessed patches: {0:?}")]
    UnprocessedPatches(Vec<String>),

    #[error("could not spawn worker command {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
