use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation; `detail` names the axes.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: alloc::vec::Vec<usize> },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training diverged; the caller keeps its last good parameters.
    #[error("non-finite loss in {stage} at epoch {epoch}, step {step}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        step: usize,
    },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Promotes a non-finite failure inside a training step to [`Error::Diverged`].
pub(crate) fn diverged(stage: &'static str, e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { stage, epoch, step },
        other => other,
    }
}
