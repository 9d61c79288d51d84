//! Joint training of an energy-based model, a generator, and an inference
//! model under a single triangle of KL divergences, plus the downstream
//! analyses that interrogate the learned energy function: disconnectivity
//! graph landscape mapping and recovery of occluded images.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fsio;
pub mod landscape;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod occlusion;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod sandbox;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
