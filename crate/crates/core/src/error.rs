use thiserror::Error;

/// Errors produced by the engine, the learners, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("{op}: has no defined derivative")]
    NonDifferentiable { op: &'static str },
    #[error("gradient target does not require grad")]
    NoGrad,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("diverged at inner step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("task {task} in batch: {source}")]
    TaskDiverged {
        task: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("all runs failed")]
    AllRunsFailed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error chain bottoms out in a non-finite value, i.e. the
    /// optimization itself blew up rather than the caller misusing the API.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Diverged { source, .. } | Error::TaskDiverged { source, .. } => {
                source.is_divergence()
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
