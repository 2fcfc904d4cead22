//! Super-resolution assisted ship detection.
//!
//! A residual-dense SR network upsamples a low-resolution frame; its
//! output (and optionally its intermediate features) feed an SSD-style
//! detector. Everything is generic over `f32`/`f64`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod imageio;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod sr;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pipeline::{FinetuneVariant, Model, ModelConfig, Variant};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, ImageTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
