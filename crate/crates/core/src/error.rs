use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("character {ch:?} at position {position} is not in the vocabulary")]
    UnknownChar { ch: char, position: usize },

    #[error("token id {id} at position {position} is out of range (vocab size {vocab_size})")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("model config mismatch:\n  expected: {expected}\n  found:    {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite {component} at step {step}")]
    NonFinite { component: &'static str, step: usize },

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed record in {path} line {line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
