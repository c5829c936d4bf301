//! Dense row-major tensors, a tape-style computation graph with reverse-mode
//! differentiation, finite-difference gradient checking and the AdamW
//! optimizer.
//!
//! The graph is rebuilt for every forward pass and consumed by
//! [`Graph::backward`]. Model parameters live outside the graph as
//! [`Tensor`]s and enter it as leaves.

mod element;
mod error;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, relative_error};
pub use graph::{Gradients, Graph, Segment, Var};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, LrSchedule};
pub use tensor::Tensor;
