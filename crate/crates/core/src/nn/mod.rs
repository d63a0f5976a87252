//! Tensor engine: parameter storage, a reverse-mode autodiff tape, layer
//! primitives (dense, convolution, normalization, attention), initializers,
//! and the Adam optimizer.

pub mod adam;
pub mod attention;
pub mod conv;
pub mod graph;
pub mod init;
pub mod store;

pub use adam::Adam;
pub use graph::{Gradients, Graph, NodeId};
pub use store::{ParamId, ParamStore, TensorD};
