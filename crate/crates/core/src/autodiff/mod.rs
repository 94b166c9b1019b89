//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Op, Var};
