use std::path::PathBuf;

use ctxsql_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema `{db_id}`: {message}")]
    Schema { db_id: String, message: String },
    #[error("{path}: record {index}{}: {message}", turn.map(|t| format!(", turn {t}")).unwrap_or_default())]
    Ingest {
        path: PathBuf,
        index: usize,
        turn: Option<usize>,
        message: String,
    },
    #[error("SQL parse error: {0}")]
    Parse(String),
    #[error("unsupported SQL construct: {0}")]
    Unsupported(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("grammar: {0}")]
    Grammar(String),
    #[error("invalid action at step {step}: {message}")]
    InvalidAction { step: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("decode budget exceeded after {0} steps")]
    DecodeBudget(usize),
    #[error("training: {0}")]
    Training(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
