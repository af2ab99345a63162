//! Image ↔ latent codecs for diffusion in a compressed space.

mod cache;
mod vae;

pub use cache::{encode_dataset, LatentDataset, LatentLoader};
pub use vae::{fit_latent_scale, kl_divergence, reparameterize, vae_loss, vae_train_step, Vae, VaeConfig};

use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// A deterministic encoder/decoder pair between pixel and latent space.
///
/// `encode` returns latents already multiplied by the codec's scale factor,
/// and `decode` undoes it, so diffusion only ever sees unit-variance latents.
pub trait LatentCodec<T: Float = f32>: Send + Sync {
    fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>>;
    /// Spatial downsampling factor.
    fn factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
}
