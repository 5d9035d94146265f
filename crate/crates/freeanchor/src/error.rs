use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("dataset error at line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("scene {id}: {msg}")]
    Scene { id: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iteration}: {msg}")]
    Training { iteration: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
