use thiserror::Error;

#[derive(Debug, Error)]
pub enum TslmError {
    #[error("empty series")]
    EmptySeries,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("context overflow: sequence of {len} positions exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("chunk mismatch: {0}")]
    Chunks(String),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("label {0:?} is not in the class set")]
    UnknownLabel(String),
    #[error("corpus has {0} samples, at least 10 are required for splitting")]
    CorpusTooSmall(usize),
    #[error("class distribution is empty")]
    EmptyDistribution,
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TslmError>;
