//! Error type shared by the tensor engine, flow layers, trainer and solver.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    /// Tensor shapes do not line up; the message names the offending axis.
    #[error("shape mismatch in {context}")]
    ShapeMismatch { context: String },

    /// An elementwise domain violation (e.g. log of a non-positive value).
    #[error("{op}: domain error at flat index {index}: {reason}")]
    Domain {
        op: &'static str,
        index: usize,
        reason: String,
    },

    /// Scale/shape arithmetic of a flow configuration failed.
    #[error("invalid flow config at scale {scale}: {reason}")]
    Config { scale: usize, reason: String },

    /// A config or argument problem not tied to a particular scale.
    #[error("{0}")]
    Invalid(String),

    #[error("actnorm '{name}' is not initialized")]
    ActnormUninitialized { name: String },

    #[error("actnorm '{name}': channel {channel} has zero variance in the initialization batch")]
    DegenerateChannel { name: String, channel: usize },

    #[error("singular matrix in {context}")]
    Singular { context: String },

    #[error("checkpoint error at byte offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    /// Latent chunk layout disagreement; names the first mismatching chunk.
    #[error("latent layout mismatch at chunk {chunk}: expected {expected}, got {got}")]
    LayoutMismatch {
        chunk: usize,
        expected: String,
        got: String,
    },

    /// A loss or objective stopped being finite.
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    /// A gradient blew up; names the parameter.
    #[error("non-finite gradient for parameter '{name}' at step {step}")]
    NonFiniteGradient { name: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

impl FlowError {
    pub fn shape(context: impl Into<String>) -> Self {
        FlowError::ShapeMismatch {
            context: context.into(),
        }
    }
}
