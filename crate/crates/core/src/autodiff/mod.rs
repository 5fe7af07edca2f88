//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live on a [`Graph`] tape; trainable tensors enter it through
//! [`Graph::input`] and read their gradients back with [`Graph::grad`] after
//! a single [`Graph::backward`] call.

pub mod check;
mod conv;
mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
