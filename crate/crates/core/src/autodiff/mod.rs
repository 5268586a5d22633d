//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Everything the forecasting model computes is expressed as operations on a
//! [`Tape`]. Parameters enter as leaves via [`Tape::param`]; after
//! [`Tape::backward`] their gradients are read back from [`Gradients`] and
//! accumulated into the owning [`Tensor`]'s gradient buffer, which stays
//! populated until explicitly zeroed.

mod tape;
mod tensor;

pub use tape::{Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

pub(crate) use tape::bivariate_nll_value;
pub use tape::LN_2PI;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{len} values do not fill shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: argument {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op} produced a non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("concat of an empty list")]
    EmptyConcat,
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("loss is not connected to any recorded parameter")]
    Detached,
}
