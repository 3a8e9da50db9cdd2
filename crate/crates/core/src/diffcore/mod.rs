//! Minimal reverse-mode differentiation over dense arrays.

mod array;
pub(crate) mod gemm;
pub mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::{check_gradients, relative_error, GradReport, LeafReport, GRAD_TOLERANCE};
pub use graph::{Evaluation, Feed, Gradients, Graph, LeafKind, Node, NodeId, Op};
