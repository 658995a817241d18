//! Minimal dense autodiff used by every learned module.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam};
pub use params::{LayerNormParams, Linear, Mlp, ParamId, ParamStore};
pub use tensor::Tensor;
