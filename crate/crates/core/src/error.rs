use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid training schedule: {0}")]
    InvalidSchedule(String),

    #[error("fisher diagonal has zero trace")]
    ZeroFisher,

    #[error("fisher diagonal is not normalized")]
    NotNormalized,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("invalid cost matrix: {0}")]
    InvalidCostMatrix(String),

    #[error("brute-force assignment supports n <= 8, got {0}")]
    TooLarge(usize),

    #[error("label {0} is not a source class")]
    UnknownLabel(usize),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("sgd diverged at step {step} (|theta| = {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
