use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over byte images laid out as channel planes of `plane` pixels.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a [u8]>, channels: usize) -> Result<Self> {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for img in images {
            if img.len() % channels != 0 {
                bail!(Input, "image of {} bytes does not split into {channels} planes", img.len());
            }
            let plane = img.len() / channels;
            for (c, px) in img.chunks(plane).enumerate() {
                for &b in px {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            bail!(Input, "cannot compute statistics of an empty dataset");
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| crate::Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stats: Self = serde_json::from_str(&text).map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))?;
        if stats.mean.len() != stats.std.len() || stats.std.iter().any(|&s| s <= 0.0) {
            bail!(Format, "{}: malformed channel statistics", path.display());
        }
        Ok(stats)
    }
}

/// Mapping between bytes and the network's input space.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Normalization {
    /// x / 127.5 − 1, giving [−1, 1].
    #[default]
    UnitIntervalSymmetric,
    /// Per-channel standardisation with precomputed statistics.
    Standardize(ChannelStats),
}

impl Normalization {
    pub fn name(&self) -> &'static str {
        match self {
            Self::UnitIntervalSymmetric => "unit_interval_symmetric",
            Self::Standardize(_) => "dataset_standardize",
        }
    }

    fn check_channel(&self, c: usize) -> Result<()> {
        if let Self::Standardize(s) = self {
            if c >= s.mean.len() {
                bail!(Dimension, "statistics cover {} channels, image has more", s.mean.len());
            }
        }
        Ok(())
    }

    pub fn normalize_byte(&self, b: u8, channel: usize) -> f32 {
        match self {
            Self::UnitIntervalSymmetric => (b as f64 / 127.5 - 1.0) as f32,
            Self::Standardize(s) => ((b as f64 / 255.0 - s.mean[channel]) / s.std[channel]) as f32,
        }
    }

    /// Inverse mapping to [0, 1], clamped.
    pub fn to_unit(&self, x: f32, channel: usize) -> f32 {
        let u = match self {
            Self::UnitIntervalSymmetric => (x as f64 + 1.0) / 2.0,
            Self::Standardize(s) => x as f64 * s.std[channel] + s.mean[channel],
        };
        u.clamp(0.0, 1.0) as f32
    }

    /// Normalises one channel-planar byte image into `out`.
    pub fn normalize_into(&self, bytes: &[u8], channels: usize, out: &mut Vec<f32>) -> Result<()> {
        self.check_channel(channels.saturating_sub(1))?;
        let plane = bytes.len() / channels.max(1);
        for (c, px) in bytes.chunks(plane.max(1)).enumerate() {
            out.extend(px.iter().map(|&b| self.normalize_byte(b, c)));
        }
        Ok(())
    }

    /// [N, C, H, W] in network space to [0, 1] pixel intensities.
    pub fn tensor_to_unit(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.rank() != 4 {
            bail!(Dimension, "expected [N, C, H, W], got {:?}", x.shape());
        }
        let c = x.dim(1);
        self.check_channel(c - 1)?;
        let plane = x.dim(2) * x.dim(3);
        let data = x
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, px)| px.iter().map(move |&v| self.to_unit(v, i % c)))
            .collect();
        Tensor::from_vec(data, x.shape())
    }
}

/// [0, 1] intensity to a byte, rounding to nearest.
pub fn unit_to_byte(u: f32) -> u8 {
    (u.clamp(0.0, 1.0) * 255.0).round() as u8
}
