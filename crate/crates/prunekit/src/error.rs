use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value first produced by layer {layer_index} ({layer_kind})")]
    NonFinite {
        layer_index: usize,
        layer_kind: String,
    },

    #[error("pruning rate {rate} outside [0, 1)")]
    RateOutOfRange { rate: f64 },

    #[error("rate vector has {got} entries but grouping has {groups} groups")]
    RateDimensionMismatch { got: usize, groups: usize },

    #[error("ranking has {got} entries but layer has {filters} filters")]
    RankingLengthMismatch { got: usize, filters: usize },

    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("IDX magic mismatch in {path}: expected {expected:#010x}, got {got:#010x}")]
    IdxBadMagic {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("IDX file {path} truncated: {detail}")]
    IdxTruncated { path: String, detail: String },

    #[error("IDX image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("kernel matrix factorization failed even at jitter {jitter}")]
    Factorization { jitter: f64 },

    #[error("gaussian process needs at least one observation")]
    EmptyGp,

    #[error("invalid optimizer budget: i0={i0}, total={total} (need 1 <= i0 <= total)")]
    BadBudget { i0: usize, total: usize },

    #[error("objective evaluation failed at iteration {iteration}: {source}")]
    ObjectiveAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
