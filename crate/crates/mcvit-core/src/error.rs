//! Error types shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Clone, Debug, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible for the attempted operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A constructor received a shape that does not describe its data.
    InvalidShape { reason: String },
    /// A configuration value violates a documented invariant.
    InvalidConfig { reason: String },
    /// `backward` was called on a root that is not a scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// A computation produced or received a non-finite value.
    NonFinite { context: &'static str },
    /// An input was empty where at least one element is required.
    EmptyInput { context: &'static str },
    /// Training produced a non-finite loss.
    Diverged { step: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            CoreError::InvalidShape { reason } => write!(f, "invalid shape: {reason}"),
            CoreError::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            CoreError::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            CoreError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            CoreError::EmptyInput { context } => write!(f, "empty input in {context}"),
            CoreError::Diverged { step } => write!(f, "training diverged at step {step}"),
        }
    }
}

impl core::error::Error for CoreError {}

impl CoreError {
    pub fn config(reason: impl Into<String>) -> Self {
        CoreError::InvalidConfig {
            reason: reason.into(),
        }
    }

    pub fn shape(reason: impl Into<String>) -> Self {
        CoreError::InvalidShape {
            reason: reason.into(),
        }
    }
}
