//! Minimal differentiable substrate: dense `f64` matrices, a recorded graph
//! with reverse-mode gradients, named parameters, Adam, and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod matrix;
pub mod nn;
mod optim;
mod param;

pub use graph::{AttentionMask, Graph, Var};
pub use matrix::Matrix;
pub use optim::Adam;
pub use param::{Gradients, ParamId, ParamStore, Parameter};

#[cfg(test)]
pub(crate) use graph::dot;
