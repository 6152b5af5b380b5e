//! Ocean-aware masked autoencoder pre-training and UNet transfer.
//!
//! Stage one pre-trains a ViT masked autoencoder whose decoder is conditioned
//! on the encoder's CLS token concatenated with projected physical ocean
//! descriptors ([`ocean`]). Stage two feeds the CLS embedding of each image
//! into a UNet through a parallel projection path fused at the bottleneck
//! ([`downstream`]), under one of three [`strategies`].

pub mod autograd;
pub mod data;
pub mod downstream;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod ocean;
pub mod params;
pub mod pretrain;
pub mod raster;
pub mod store;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
