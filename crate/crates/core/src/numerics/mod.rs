//! Dense `f64` tensors, a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_with_finite_differences, evaluate, finite_difference_check, relative_error,
    GradCheckReport, ParamCheck, RELATIVE_ERROR_FLOOR,
};
pub use params::ParameterStore;
pub use tape::{Gradients, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("masked softmax: row {row} has every entry masked")]
    AllMasked { row: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) out of range for {shape:?}")]
    SliceOutOfRange { shape: Vec<usize>, start: usize, len: usize },
    #[error("concat of zero parts")]
    EmptyConcat,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: zero-norm vector under cosine distance")]
    ZeroNorm { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
}
