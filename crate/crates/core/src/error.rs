use thiserror::Error;

/// Errors raised by the discrimination-power pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite loss while probing parameter {index}")]
    Evaluation { index: usize },

    #[error("degenerate mixture component {component}: zero resultant direction")]
    DegenerateComponent { component: usize },

    #[error("degenerate layer `{layer}`: zero average strength")]
    DegenerateLayer { layer: String },

    #[error("{stage} diverged (loss = {loss}); try a smaller learning rate")]
    Divergence { stage: &'static str, loss: f64 },

    #[error("exact Shapley enumeration supports at most {limit} regions, got {regions}")]
    TooManyRegions { regions: usize, limit: usize },

    #[error("tensor format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("resample error: {0}")]
    Resample(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
