use crate::error::Result;
use crate::tensor::{Float, Rng, Tensor};

/// An ε-prediction network: given x_t and t, estimates the injected noise.
pub trait NoisePredictor<T: Float>: Send + Sync {
    /// `dropout` is `Some` only in training mode.
    fn predict_noise(
        &self,
        x: &Tensor<T>,
        timesteps: &[usize],
        labels: Option<&[usize]>,
        dropout: Option<&mut Rng>,
    ) -> Result<Tensor<T>>;

    /// Label reserved for "no class", when the model is class-conditional.
    fn null_class(&self) -> Option<usize> {
        None
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl<T: Float> NoisePredictor<T> for ZeroPredictor {
    fn predict_noise(&self, x: &Tensor<T>, _: &[usize], _: Option<&[usize]>, _: Option<&mut Rng>) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(x.shape()))
    }
}
