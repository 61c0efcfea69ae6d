//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are held by the
//! tape nodes; parameters and caches can be borrowed into a graph without a
//! copy. [`Graph::backward`] walks the nodes in reverse insertion order,
//! which is a valid topological order because every op only references
//! earlier nodes.

mod adam;
pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use adam::{AdamState, InverseSqrtSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
