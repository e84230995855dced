use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dampening must be positive and finite, got {0}")]
    InvalidDampening(f64),

    #[error("invalid dimension: {what} = {value}")]
    InvalidDimension { what: &'static str, value: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("estimator already holds its declared {capacity} gradients")]
    Capacity { capacity: usize },

    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },

    #[error("group at offset {offset} (size {size}) straddles a boundary of width {boundary}")]
    Alignment { offset: usize, size: usize, boundary: usize },

    #[error("inverse Fisher sub-matrix of group {group} is not positive definite")]
    SingularGroup { group: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("group {group} selected more than once")]
    GroupConflict { group: usize },

    #[error("target sparsity {target} is below current sparsity {current}")]
    Monotonicity { current: f64, target: f64 },

    #[error("refusing to prune with an uninformed Fisher estimate (no gradients consumed)")]
    UninformedFisher,

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss on batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("cannot keep {keep} of {depth} hidden layers")]
    LayerDrop { keep: usize, depth: usize },

    #[error("recipe error at `{path}`: {message}")]
    Recipe { path: String, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn recipe(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Recipe { path: path.into(), message: message.into() }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase { phase, source: Box::new(self) }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Recipe { .. } | Error::Schedule(_) => true,
            Error::Phase { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
