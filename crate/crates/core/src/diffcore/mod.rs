//! Minimal dense-tensor math with reverse-mode differentiation: the node
//! vocabulary shared by every model, plus the optimizer and the
//! finite-difference gradient oracle.

mod adam;
mod check;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{finite_diff_gradient, gradient_check, GradCheckReport};
pub(crate) use graph::sigmoid;
pub use graph::{
    BnRunning, ComputeGraph, Evaluation, GraphBuilder, GraphState, Mode, NamedTensors, NodeId,
    PairScope,
};
pub use tensor::Tensor;
