//! Diffusion-based long-term action anticipation.
//!
//! An observed feature sequence is encoded by a transformer; a query-based
//! decoder iteratively denoises latent embeddings of the future actions, which
//! are then decoded into labels and durations.

pub mod autograd;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod net;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
