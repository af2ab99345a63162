//! Desk-scale denoising diffusion toolkit.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, Float, Rng, Tensor};
pub mod gradcheck;
pub mod nn;
pub mod schedule;
pub mod model;
pub mod unet;
pub mod data;
pub mod diffusion;
pub mod optim;
pub mod latent;
pub mod sampler;
pub mod metrics;
pub mod cli;
