use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Batch, BatchSource};
use crate::error::{bail, Result};
use crate::tensor::{no_grad, Rng, Tensor};

use super::LatentCodec;

const MAGIC: &[u8; 4] = b"DFLT";
const VERSION: u32 = 1;

/// Encoded dataset: `count` latents of shape [channels, height, width].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Class labels, kept in memory only; the cache file stores latents alone.
    pub labels: Option<Vec<usize>>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.item_len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let per = self.item_len();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.len() as u32, self.channels as u32, self.height as u32, self.width as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            bail!(Format, "not a latent cache (bad magic)");
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if field(0) != VERSION as usize {
            bail!(Format, "latent cache version {} is not supported", field(0));
        }
        let (count, channels, height, width) = (field(1), field(2), field(3), field(4));
        let payload = &bytes[24..];
        let want = count
            .checked_mul(channels * height * width)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| crate::Error::Format("latent cache header overflows".into()))?;
        if payload.len() != want {
            bail!(Format, "latent cache payload is {} bytes, header implies {want}", payload.len());
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { channels, height, width, data, labels: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::fs::File::open(path)?)
    }
}

/// Maps every image to its (scaled) posterior mean.
pub fn encode_dataset<'a, I>(codec: &dyn LatentCodec<f32>, batches: I) -> Result<LatentDataset>
where
    I: IntoIterator<Item = &'a Batch<f32>>,
{
    let mut out: Option<LatentDataset> = None;
    let mut labels: Option<Vec<usize>> = Some(Vec::new());
    for batch in batches {
        let z = no_grad(|| codec.encode(&batch.images))?;
        let ds = out.get_or_insert_with(|| LatentDataset {
            channels: z.dim(1),
            height: z.dim(2),
            width: z.dim(3),
            data: Vec::new(),
            labels: None,
        });
        if z.shape()[1..] != [ds.channels, ds.height, ds.width] {
            bail!(Dimension, "latent shape changed mid-dataset: {:?}", z.shape());
        }
        ds.data.extend_from_slice(z.data());
        match (&mut labels, &batch.labels) {
            (Some(all), Some(l)) => all.extend_from_slice(l),
            _ => labels = None,
        }
    }
    let mut ds = out.ok_or_else(|| crate::Error::Input("no images to encode".into()))?;
    ds.labels = labels;
    Ok(ds)
}

/// Shuffled mini-batches over a latent dataset; the final partial batch is dropped.
pub struct LatentLoader<'a> {
    pub dataset: &'a LatentDataset,
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl BatchSource<f32> for LatentLoader<'_> {
    fn batches(&mut self, epoch: usize) -> Result<Box<dyn Iterator<Item = Result<Batch<f32>>> + '_>> {
        let n = self.dataset.len();
        if self.batch_size == 0 || self.batch_size > n {
            bail!(Config, "batch_size {} does not fit a latent dataset of {n}", self.batch_size);
        }
        let mut order: Vec<usize> = (0..n).collect();
        if self.shuffle {
            Rng::derive(self.seed, epoch as u64).shuffle(&mut order);
        }
        let ds = self.dataset;
        let bs = self.batch_size;
        let shape = [bs, ds.channels, ds.height, ds.width];
        Ok(Box::new((0..n / bs).map(move |b| {
            let idx = &order[b * bs..(b + 1) * bs];
            let mut data = Vec::with_capacity(bs * ds.item_len());
            for &i in idx {
                data.extend_from_slice(ds.item(i));
            }
            let labels = ds.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            Ok(Batch::new(Tensor::from_vec(data, &shape)?, labels))
        })))
    }
}
