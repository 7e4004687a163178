use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("all hidden vectors had zero norm in layer {layer}; cosine similarity undefined")]
    ZeroNorm { layer: usize },

    #[error("prune plan rejected: {0}")]
    Plan(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn config_err<T>(field: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        field,
        reason: reason.into(),
    })
}
