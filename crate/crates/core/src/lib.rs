//! Diffusion-guided language modeling at desk scale.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedules;
pub mod verify;

pub use error::{Error, Result};
