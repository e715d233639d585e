use std::path::PathBuf;

use aroid_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("attack error: {0}")]
    Attack(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("ingestion error in {path} at byte {offset}: {msg}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
