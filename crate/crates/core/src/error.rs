use alloc::string::String;

/// Errors raised by the stitching primitives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tap {tap} is not a registered tap point (valid: 0..={max})")]
    InvalidTap { tap: usize, max: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite values encountered in {0}")]
    Numerics(String),
    #[error("label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Self {
        Error::Shape {
            expected: alloc::format!("{expected:?}"),
            got: alloc::format!("{got:?}"),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
