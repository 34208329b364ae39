//! Backbone 3D CNN, the multi-branch windowed model, training and Grad-CAM.

pub mod config;
pub mod gradcam;
pub mod model;
pub mod train;

pub use config::{BackboneConfig, LmlccConfig, ModelConfig, Scale, TrainConfig};
pub use gradcam::grad_cam;
pub use model::{Forward, Mode, Network, Param};
pub use train::{evaluate_loss, train, train_step, write_epoch_log, EpochLog, TrainOutcome};
