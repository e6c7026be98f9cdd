//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records forward operations on [`Var`] handles. Parameters live
//! in a [`ParamStore`]; a backward pass from a scalar root adds
//! `d root / d param` into each parameter's gradient buffer, and
//! [`AdamState::step`] consumes those buffers.
//!
//! Subgradient conventions: `relu'(0) = 0`, and hard min reductions send the
//! whole gradient to the first minimizing entry.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, Metadata, MAGIC, VERSION};
pub use graph::{Axis, Gradients, Graph, MinMode, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{len} values do not fill shape {shape:?}")]
    BadData { shape: [usize; 2], len: usize },
    #[error("{op}: range {start}..{end} out of bounds for shape {shape:?}")]
    Range {
        op: &'static str,
        shape: [usize; 2],
        start: usize,
        end: usize,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("trainable parameter {0:?} has no gradient for this step")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
