//! Lung nodule malignancy classification from CT patches.
//!
//! The pipeline runs MetaImage volumes and radiologist ratings through
//! consensus labeling, HU normalization and patch extraction, into a 3D CNN
//! whose input is split into learnable intensity windows. Training,
//! pseudo-labeling, evaluation and Grad-CAM sit on a small reverse-mode
//! differentiation engine. All numeric code is generic over `f32`/`f64`.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffkit;
pub mod error;
pub mod huwindow;
pub mod ingest;
pub mod labeling;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod preprocess;
pub mod scalar;
pub mod semisup;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = diffkit::Tensor<f32>;
pub type Tensor64 = diffkit::Tensor<f64>;
pub type Graph32 = diffkit::Graph<f32>;
pub type Graph64 = diffkit::Graph<f64>;
pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
pub type Patch32 = preprocess::Patch<f32>;
pub type Patch64 = preprocess::Patch<f64>;
pub type CtVolume32 = ingest::CtVolume<f32>;
pub type CtVolume64 = ingest::CtVolume<f64>;
