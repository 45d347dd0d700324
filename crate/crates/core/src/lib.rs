//! Dual-attention convolutional network for hyperspectral image
//! super-resolution, with a small reverse-mode autodiff engine, data
//! pipeline, metrics and trainer.

pub mod attention;
pub mod band_grouping;
pub mod channel_attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod upsampler;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{DacnConfig, DacnParams};
pub use tensor::Tensor;
