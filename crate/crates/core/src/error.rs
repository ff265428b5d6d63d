//! Error type shared across the crate.

use thiserror::Error;

/// Errors emitted by tensors, models, samplers, and IO helpers.
#[derive(Debug, Error)]
pub enum QuiltError {
    /// Two tensors (or a tensor and a grid) disagree on shape.
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A configuration value violates its invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An input carried NaN or infinite values.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A batch-consuming operation received no elements.
    #[error("empty batch")]
    EmptyBatch,

    /// Numerical integration or training produced NaN/Inf.
    #[error("divergence at step {step}: {context}")]
    Divergence { step: usize, context: String },

    /// Two parameter sets do not share the same structure.
    #[error("parameter structure mismatch: {0}")]
    ParamMismatch(String),

    /// Rejection sampling exhausted its attempt budget.
    #[error("rejection sampling failed after {attempts} attempts: {context}")]
    RejectionFailure { attempts: usize, context: String },

    /// Checkpoint file is missing, truncated, or malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QuiltError>;
