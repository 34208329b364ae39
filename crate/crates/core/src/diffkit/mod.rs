//! Small reverse-mode differentiation engine and the layers the models need.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use graph::{bce_value, Graph, NodeId};
pub use optim::{Adam, AdamConfig, PlateauScheduler};
pub use tensor::Tensor;
