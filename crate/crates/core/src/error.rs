use std::path::PathBuf;

use crate::corpus::Document;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("insufficient capacity: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: line {line}: {msg}")]
    Validation { path: PathBuf, line: usize, msg: String },

    #[error("transport error after {attempts} attempt(s){}: {msg}", status.map(|s| format!(" (last status {s})")).unwrap_or_default())]
    Transport { attempts: u32, status: Option<u16>, msg: String },

    #[error("request rejected with status {status}: {body}")]
    Request { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("document parse error: {0}")]
    DocumentParse(String),

    #[error("encoding error for document {doc_id}: {msg}")]
    Encoding { doc_id: String, msg: String },

    #[error("stale context cache: cache fingerprint {cache} does not match weights {weights}; rebuild the cache with the current weights")]
    StaleCache { cache: String, weights: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("anchor generation failed after {} completed anchor(s): {source}", completed.len())]
    AnchorGeneration {
        completed: Vec<Document>,
        #[source]
        source: Box<Error>,
    },

    #[error("expansion of {anchor_id} failed with {deficit} document(s) missing: {source}")]
    Expansion {
        anchor_id: String,
        deficit: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("condition {condition}: {source}")]
    Condition {
        condition: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
