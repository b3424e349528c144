//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records primitives as they are applied. Values are computed
//! eagerly; [`Graph::forward`] replays the recorded ops after leaves change,
//! and [`Graph::backward`] sweeps the tape in reverse from a scalar root.
//! Any node whose value contains NaN or infinity is rejected at evaluation.

mod gradcheck;
mod graph;
mod kernels;
pub mod suite;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_with_floor, GradCheckReport, DEFAULT_EPSILON, DEFAULT_FLOOR,
};
pub use graph::{Gradients, Graph, Node, Op, Var};
pub use tensor::Tensor;

pub(crate) use tensor::Fnv;
