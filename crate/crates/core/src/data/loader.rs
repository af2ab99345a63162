use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{bail, Result};
use crate::tensor::{Rng, Tensor};

use super::{flip_horizontal, Batch, BatchSource, Dataset, Normalization};

/// Batches buffered per worker.
const QUEUE_DEPTH: usize = 2;
/// Offsets the augmentation seed away from the shuffle seed.
const AUGMENT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub num_workers: usize,
    pub flip_prob: f64,
    pub normalization: Normalization,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            shuffle: true,
            seed: 42,
            num_workers: 4,
            flip_prob: 0.5,
            normalization: Normalization::default(),
        }
    }
}

impl LoaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            bail!(Config, "flip_prob must be in [0, 1], got {}", self.flip_prob);
        }
        Ok(())
    }
}

/// Flips with probability `flip_prob`; otherwise leaves the image alone.
pub fn augment(image: &mut [u8], width: usize, rng: &mut Rng, flip_prob: f64) {
    if flip_prob > 0.0 && rng.bernoulli(flip_prob) {
        flip_horizontal(image, width);
    }
}

/// Item order for an epoch; the identity when shuffling is off.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        Rng::derive(seed, epoch as u64).shuffle(&mut order);
    }
    order
}

fn build_batch(ds: &Dataset, cfg: &LoaderConfig, epoch: usize, idx: &[usize]) -> Result<Batch<f32>> {
    let mut data = Vec::with_capacity(idx.len() * ds.image_len());
    let mut img = Vec::with_capacity(ds.image_len());
    for &i in idx {
        img.clear();
        img.extend_from_slice(&ds.images[i]);
        let mut rng = Rng::derive(cfg.seed.wrapping_add(AUGMENT_SALT), ((epoch as u64) << 32) | i as u64);
        augment(&mut img, ds.width, &mut rng, cfg.flip_prob);
        cfg.normalization.normalize_into(&img, ds.channels, &mut data)?;
    }
    let images = Tensor::from_vec(data, &[idx.len(), ds.channels, ds.height, ds.width])?;
    Ok(Batch::new(images, Some(idx.iter().map(|&i| ds.labels[i]).collect())))
}

/// Shuffled, augmented, normalised mini-batches with optional worker threads.
///
/// Batch k of an epoch is always built by worker k mod W from the same item
/// indices and per-item random streams, so the output does not depend on W.
pub struct Loader {
    dataset: Arc<Dataset>,
    cfg: LoaderConfig,
}

impl Loader {
    pub fn new(dataset: Arc<Dataset>, cfg: LoaderConfig) -> Result<Self> {
        cfg.validate()?;
        dataset.validate()?;
        if dataset.is_empty() {
            bail!(Config, "dataset is empty");
        }
        if cfg.batch_size > dataset.len() {
            bail!(Config, "batch_size {} exceeds dataset size {}", cfg.batch_size, dataset.len());
        }
        Ok(Self { dataset, cfg })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.cfg.batch_size
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn epoch(&self, epoch: usize) -> EpochIter {
        let order = Arc::new(epoch_permutation(self.dataset.len(), self.cfg.seed, epoch, self.cfg.shuffle));
        let total = self.batches_per_epoch();
        let workers = self.cfg.num_workers.min(total);
        let mut receivers = Vec::new();
        let mut handles = Vec::new();
        for w in 0..workers {
            let (tx, rx) = sync_channel(QUEUE_DEPTH);
            let (ds, cfg, order) = (self.dataset.clone(), self.cfg.clone(), order.clone());
            handles.push(std::thread::spawn(move || {
                let bs = cfg.batch_size;
                for k in (w..total).step_by(workers) {
                    let batch = build_batch(&ds, &cfg, epoch, &order[k * bs..(k + 1) * bs]);
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            }));
            receivers.push(rx);
        }
        EpochIter {
            dataset: self.dataset.clone(),
            cfg: self.cfg.clone(),
            order,
            epoch,
            next: 0,
            total,
            receivers,
            handles,
        }
    }
}

pub struct EpochIter {
    dataset: Arc<Dataset>,
    cfg: LoaderConfig,
    order: Arc<Vec<usize>>,
    epoch: usize,
    next: usize,
    total: usize,
    receivers: Vec<Receiver<Result<Batch<f32>>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Iterator for EpochIter {
    type Item = Result<Batch<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let k = self.next;
        self.next += 1;
        if self.receivers.is_empty() {
            let bs = self.cfg.batch_size;
            return Some(build_batch(&self.dataset, &self.cfg, self.epoch, &self.order[k * bs..(k + 1) * bs]));
        }
        let rx = &self.receivers[k % self.receivers.len()];
        Some(rx.recv().unwrap_or_else(|_| Err(crate::Error::Input("data worker exited early".into()))))
    }
}

impl Drop for EpochIter {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl BatchSource<f32> for Loader {
    fn batches(&mut self, epoch: usize) -> Result<Box<dyn Iterator<Item = Result<Batch<f32>>> + '_>> {
        Ok(Box::new(self.epoch(epoch)))
    }
}
