//! Dataset ingestion, normalisation, augmentation and mini-batching.

mod dataset;
mod loader;
mod normalize;

pub use dataset::{flip_horizontal, load_cifar10, load_image, load_image_folder, parse_cifar10_binary, Dataset, CIFAR_RECORD};
pub use loader::{augment, epoch_permutation, EpochIter, Loader, LoaderConfig};
pub use normalize::{unit_to_byte, ChannelStats, Normalization};

use crate::tensor::{Float, Tensor};

/// One mini-batch of normalised images, with labels when the data has them.
#[derive(Clone, Debug)]
pub struct Batch<T: Float = f32> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Float> Batch<T> {
    pub fn new(images: Tensor<T>, labels: Option<Vec<usize>>) -> Self {
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that can hand out the batches of a given epoch.
pub trait BatchSource<T: Float = f32> {
    fn batches(&mut self, epoch: usize) -> crate::Result<Box<dyn Iterator<Item = crate::Result<Batch<T>>> + '_>>;
}

/// A fixed list of batches, replayed identically every epoch.
impl<T: Float> BatchSource<T> for Vec<Batch<T>> {
    fn batches(&mut self, _epoch: usize) -> crate::Result<Box<dyn Iterator<Item = crate::Result<Batch<T>>> + '_>> {
        Ok(Box::new(self.iter().cloned().map(Ok)))
    }
}
