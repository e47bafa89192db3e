use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is below {eps:e}")]
    ZeroVector { eps: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention pooling over an empty (fully masked) token set")]
    EmptyPool,

    #[error("text has {len} tokens, the limit is {max}")]
    TooLong { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },

    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("detector confidence must be positive, got {0}")]
    InvalidConfidence(f64),

    #[error("fusion weight alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("row {row} of `{what}` is not unit-norm (norm {norm})")]
    NotNormalized { what: &'static str, row: usize, norm: f64 },

    #[error("expected {expected} hard negatives, got {got}")]
    BadNegativeCount { expected: usize, got: usize },

    #[error("batch of {0} texts is too small, need at least 2")]
    BatchTooSmall(usize),

    #[error("index {index} out of range for {len} items")]
    BadIndex { index: usize, len: usize },

    #[error("stage 2 requires the `{0}` loss component")]
    MissingComponent(&'static str),

    #[error("cannot split {samples} samples across {workers} workers")]
    TooFewSamples { samples: usize, workers: usize },

    #[error("worker {worker} state hash {got} differs from worker 0 ({expected})")]
    Desync { worker: usize, expected: String, got: String },

    #[error("slot `{slot}` has {got} values, at least {need} are required")]
    VocabTooSmall { slot: &'static str, got: usize, need: usize },

    #[error("phrase has no perturbable attribute slot")]
    NoSlot,

    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },

    #[error("gradient for `{0}` is not finite; step aborted")]
    NonFiniteGrad(String),

    #[error("stage 2 needs a stage-1 checkpoint")]
    MissingCheckpoint,

    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("expected 11 candidates (1 positive + 10 distractors), got {0}")]
    BadCandidateCount(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
