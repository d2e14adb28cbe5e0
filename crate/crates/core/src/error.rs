use thiserror::Error;

use crate::training::LossRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear solve failed: {0}")]
    Singular(String),

    /// Training produced a non-finite loss. The history up to the failing
    /// iteration is retained.
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        history: Vec<LossRecord>,
    },

    /// A simulator or filter produced a non-finite value at a time step.
    #[error("non-finite value at step {step}: {context}")]
    NonFiniteStep { step: usize, context: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    /// True for errors that come from numerics rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Singular(_)
                | Error::Divergence { .. }
                | Error::NonFiniteStep { .. }
        )
    }
}
