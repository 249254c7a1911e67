//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("activation site {0} was not registered for capture")]
    SiteNotCaptured(String),

    #[error("sequence probability underflow: log-prob {logp} below {floor}")]
    Underflow { logp: f64, floor: f64 },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds max-seq-len {max}")]
    OverLength { len: usize, max: usize },

    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("correlation undefined: zero variance in {0} summary")]
    ZeroVariance(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
