//! Differentiable-computation substrate: dense tensors, a reverse-mode tape,
//! parameter storage, gradient checking, AdamW and checkpoints.
//!
//! Everything runs in `f64`.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use gradcheck::{finite_difference_check, GradCheckReport, ParamCheck};
pub use optim::{AdamW, AdamWConfig, StepOutcome};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{segments_from_lengths, Segment, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },
    #[error("bad segments in {op}: {detail}")]
    Segments { op: &'static str, detail: String },
    #[error("loss variable is not on this tape")]
    NotOnTape,
    #[error("loss must be a 1x1 scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
