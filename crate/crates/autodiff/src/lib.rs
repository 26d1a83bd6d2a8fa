//! Dense reverse-mode automatic differentiation over `f32` tensors.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; every op
//! method evaluates eagerly and appends a node, so the list is already in
//! topological order. [`Graph::backward`] walks it once in reverse and
//! accumulates vector-Jacobian products additively.
//!
//! Matrix-shaped ops treat leading dimensions as rows. Sequence ops
//! (attention, convolution, pooling) take a list of segment lengths so that
//! a batch of variable-length sequences can be stacked into one matrix.

mod backward;
pub mod error;
pub mod graph;
pub mod kernels;
mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Segments, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
