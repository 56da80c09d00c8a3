//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Trainable values
//! live in a [`ParamStore`] and are bound into a graph with
//! [`Graph::param`]; after [`Graph::backward`] the gradients are pulled into
//! the store with [`ParamStore::accumulate_grads`] and applied by
//! [`SgdMomentum::step`].

mod graph;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{FaultInjection, Graph, NodeId, NORM_FLOOR};
pub use params::{ParamId, ParamStore, Parameter, SgdMomentum};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
