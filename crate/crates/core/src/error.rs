//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vocabulary overflow: {0}")]
    VocabularyOverflow(String),

    #[error("invalid corpus settings: {0}")]
    InvalidCorpusSpec(String),

    #[error("infeasible split: relation {relation} has {available} facts, {required} required")]
    InfeasibleSplit {
        relation: String,
        available: usize,
        required: usize,
    },

    #[error("invalid split request: {0}")]
    InvalidSplit(String),

    #[error("counterfact record {index}: {message}")]
    CounterFactParse { index: usize, message: String },

    #[error("token {token} at position {position} is outside the vocabulary (size {vocab_size})")]
    OutOfVocab {
        token: usize,
        position: usize,
        vocab_size: usize,
    },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("degenerate key: (C^-1 k)^T k = {0:e} is too close to zero")]
    DegenerateKey(f64),

    #[error("subject tokens not found in prompt: {0}")]
    SubjectNotFound(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero probability in {0}")]
    ZeroProbability(&'static str),

    #[error("cohen's d undefined: both samples have zero variance")]
    UndefinedEffectSize,

    #[error("unknown convention {0:?}")]
    UnknownConvention(String),

    #[error("missing activation statistics for structured-activation pruning")]
    MissingActivationStats,

    #[error("edit {edit_id}: {message}")]
    EditMismatch { edit_id: String, message: String },

    #[error("bad checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
