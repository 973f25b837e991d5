use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid vocabulary at line {line}: {reason}")]
    Vocab { line: usize, reason: String },

    #[error("retrieval depth must be positive")]
    ZeroRetrievalDepth,

    #[error("prefix of {prefix} tokens is longer than the {total}-token prompt")]
    PrefixTooLong { prefix: usize, total: usize },

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token id {id} is outside the model vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("cannot prefill an empty prompt")]
    EmptyPrompt,

    #[error("prompt layout does not tile the token sequence: {0}")]
    Layout(String),

    #[error("item of {item} bytes exceeds the {limit}-byte budget")]
    ItemExceedsBudget { item: u64, limit: u64 },

    #[error("over budget ({used} + {incoming} > {limit}) with nothing evictable")]
    NothingEvictable { used: u64, incoming: u64, limit: u64 },

    #[error("corrupt slice {name}: {reason}")]
    CorruptSlice { name: String, reason: String },

    #[error("unknown {kind} `{name}`")]
    UnknownComponent { kind: &'static str, name: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("{file} line {line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },

    #[error("trace line {line}: {reason}")]
    Trace { line: usize, reason: String },

    #[error("event at {at} precedes last processed timestamp {last}")]
    OutOfOrder { at: u64, last: u64 },

    #[error("background work attempted while serving a query")]
    WrongPhase,

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
