//! Minimal reverse-mode differentiation, optimizers, and checkpoints.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, FLOOR_PER_UNIT_LOSS};
pub use graph::{log_softmax_values, sigmoid, Graph, NodeId};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor, CHECKPOINT_MAGIC};
