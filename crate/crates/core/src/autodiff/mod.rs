//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records primitive applications in topological order. Values
//! are computed eagerly on construction; [`Graph::backward`] then walks the
//! record in reverse, fills the gradient of every trainable leaf, and frees
//! intermediate values. Non-finite results are rejected at the op that
//! produced them.
//!
//! ```
//! use affect_bnn::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new(0);
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
//! ```

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

pub use graph::{sigmoid, softplus, Graph, OpAttrs, OpTag, Var};
pub use gradcheck::{gradcheck, gradcheck_fn, gradcheck_report, GradcheckReport};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite input value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: OpTag, detail: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: OpTag, expected: usize, got: usize },
    #[error("{op}: invalid attribute ({detail})")]
    InvalidAttr { op: OpTag, detail: String },
    #[error("{op} produced a non-finite value at node {node}")]
    NonFinite { op: OpTag, node: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("graph was already consumed by backward")]
    GraphConsumed,
    #[error("value of node {node} was released by backward")]
    Released { node: usize },
    #[error("unknown op tag {0:?}")]
    UnknownOp(String),
    #[error("op {0} is not supported here")]
    UnsupportedOp(OpTag),
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidEpsilon(f64),
}
