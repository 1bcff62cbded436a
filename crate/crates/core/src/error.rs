//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty shape: all dimensions must be >= 1, got {0:?}")]
    EmptyShape((usize, usize, usize)),

    #[error("no closed form for expected norm of `{0}` noise")]
    NoClosedForm(String),

    #[error("vocab too small: need at least 2 tokens, got {0}")]
    VocabTooSmall(usize),

    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadMismatch { d_model: usize, n_heads: usize },

    #[error("token id {id} out of range (vocab {vocab}) at batch {batch}, position {position}")]
    TokenOutOfRange {
        id: usize,
        vocab: usize,
        batch: usize,
        position: usize,
    },

    #[error("sequence length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no supervised positions: loss mask selects nothing")]
    EmptyLossMask,

    #[error("loss mask covers padding at batch {batch}, position {position}")]
    LossMaskOutsidePad { batch: usize, position: usize },

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("divergence: non-finite {what} at step {step}")]
    Divergence { what: String, step: usize },

    #[error("empty response in example {index}")]
    EmptyResponse { index: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty corpus: {0}")]
    EmptyCorpus(PathBuf),

    #[error("examples exceed max length {max_len} after tokenization: indices {indices:?}")]
    OverlongExamples { max_len: usize, indices: Vec<usize> },

    #[error("sequence too short: {len} tokens, need at least {min}")]
    SequenceTooShort { len: usize, min: usize },

    #[error("probe radius must be positive, got {0}")]
    NonPositiveRadius(f64),

    #[error("denominator norm is zero")]
    ZeroDenominator,

    #[error("axis values must be strictly increasing and nonempty: {0:?}")]
    BadAxis(Vec<usize>),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
