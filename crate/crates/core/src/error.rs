use qfsum_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("prompt spans out of range: {0}")]
    Spans(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("query-focused memory needs the query instruction state before compressing")]
    MissingQueryState,
    #[error("{path}:{line}: {msg}")]
    Data {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("missing key `{key}` on line {line}")]
    Schema { key: String, line: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
