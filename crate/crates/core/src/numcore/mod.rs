//! Dense tensors, a define-by-run gradient tape, Adam, finite-difference
//! gradient checking and binary checkpoints.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
pub(crate) mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, TensorCheck};
pub use params::{Param, ParamStore};
pub use tape::{dropout_mask, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid init scale {0}")]
    BadInit(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
