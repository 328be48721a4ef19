//! Dense `f64` tensors and a small reverse-mode differentiation engine.
//!
//! A [`Graph`] is built once per network shape, then evaluated with
//! [`Graph::forward`] against named [`Bindings`] and differentiated with
//! [`Graph::backward`]. There is no broadcasting: every op states its shapes
//! explicitly.

mod check;
mod eval;
mod graph;
pub mod kernels;
mod optim;
mod store;
mod tensor;

pub use check::grad_check;
pub use eval::{Bindings, Gradients, Values};
pub use graph::{Graph, NodeId, Op};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use store::{ParamStore, CHECKPOINT_MAGIC};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("input {0:?} declared twice")]
    DuplicateInput(String),
    #[error("input {0:?} is not bound")]
    UnboundInput(String),
    #[error("input {name:?} expects shape {expected:?}, got {got:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("input {0:?} contains NaN or infinite values")]
    NonFiniteInput(String),
    #[error("node {node} ({op}) produced NaN or infinite values")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss node {node} has shape {shape:?}, expected a scalar")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("values were computed for a different graph")]
    StaleValues,
    #[error("no gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error("no parameter named {0:?}")]
    MissingParam(String),
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
