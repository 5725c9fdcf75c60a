//! Reverse-mode differentiation over a closed set of tensor primitives.

mod gradcheck;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, relative_error, EntryCheck, GradCheckOptions, GradReport, ParamCheck, Stencil,
};
pub use primitive::{evaluate, vjp, Primitive, MASK_VALUE};
pub use tape::{NodeId, ParamId, ParamStore, Parameter, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{kind}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        kind: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {count} values")]
    ElementCount { shape: Vec<usize>, count: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("node {0} is not recorded on this tape")]
    DanglingNode(usize),
    #[error("parameter {0} is not in the store")]
    UnknownParam(usize),
    #[error("seed shape {seed:?} differs from output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
