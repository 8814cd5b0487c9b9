//! Dense tensors, reverse-mode differentiation, layers and the optimizer
//! shared by both networks.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
