//! Dense tensors, forward kernels and reverse-mode gradients.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{cosine_similarity, finite_difference_grad, max_relative_error};
pub use graph::{Gradients, Graph, NodeId, Param, ParamId, ParamStore};
