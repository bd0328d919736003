//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape for one forward pass: leaves are created with
//! [`Graph::param`] (gradient wanted) or [`Graph::constant`], every
//! primitive application appends a node, and [`Graph::backward`] sweeps the
//! tape in reverse from a scalar output. Graphs are cheap and rebuilt for
//! every evaluation.

mod gradcheck;
mod graph;
pub mod special;
mod tensor;

pub use gradcheck::{check_gradients, compare_gradients, relative_error, GradReport, KINK_MARGIN, ROUNDOFF_ULPS};
pub use graph::{apply_primitive, sigmoid, softplus, Gradients, Graph, NodeId, Primitive};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("{op} takes {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("output does not depend on any parameter")]
    Detached,
}
