//! Differentiable computation substrate: dense tensors, a reverse-mode tape,
//! named parameter stores and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Grads, NodeId};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
