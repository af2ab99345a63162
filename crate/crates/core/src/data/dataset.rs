use std::path::{Path, PathBuf};

use crate::error::{bail, Result};

use super::Normalization;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Images stored as channel-planar bytes, all of one shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            bail!(Input, "{} images but {} labels", self.images.len(), self.labels.len());
        }
        if let Some(i) = self.images.iter().position(|im| im.len() != self.image_len()) {
            bail!(Input, "image {i} has {} bytes, expected {}", self.images[i].len(), self.image_len());
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_count) {
            bail!(Input, "label {l} out of range for {} classes", self.class_count);
        }
        Ok(())
    }

    /// Normalised tensor [len, C, H, W] of the images at `indices`.
    pub fn tensor(&self, indices: &[usize], norm: &Normalization) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            norm.normalize_into(&self.images[i], self.channels, &mut data)?;
        }
        Tensor::from_vec(data, &[indices.len(), self.channels, self.height, self.width])
    }
}

/// Splits CIFAR-10 binary records: one label byte then R, G and B planes of 1024 bytes.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        bail!(
            Format,
            "CIFAR-10 data of {} bytes leaves {} trailing bytes after whole {CIFAR_RECORD}-byte records",
            bytes.len(),
            bytes.len() % CIFAR_RECORD
        );
    }
    let mut ds = Dataset {
        class_count: 10,
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        class_names: ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
            .map(String::from)
            .to_vec(),
        ..Default::default()
    };
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            bail!(Format, "record {i} has label byte {}, expected 0-9", rec[0]);
        }
        ds.labels.push(rec[0] as usize);
        ds.images.push(rec[1..].to_vec());
    }
    Ok(ds)
}

/// Reads a CIFAR-10 binary file, or every `data_batch_*.bin` in a directory.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!(Input, "no data_batch_*.bin files in {}", path.display());
    }
    let mut all = Dataset::default();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| crate::Error::Input(format!("{}: {e}", f.display())))?;
        let part = parse_cifar10_binary(&bytes).map_err(|e| crate::Error::Format(format!("{}: {e}", f.display())))?;
        if all.images.is_empty() {
            all = part;
        } else {
            all.images.extend(part.images);
            all.labels.extend(part.labels);
        }
    }
    Ok(all)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| crate::Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// Decodes one PNG/PPM file to channel-planar bytes, resizing bilinearly to `size` when given.
pub fn load_image(path: &Path, channels: usize, size: Option<usize>) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| crate::Error::Format(format!("{}: {e}", path.display())))?;
    let img = match size {
        Some(s) if (img.width() as usize, img.height() as usize) != (s, s) => {
            img.resize_exact(s as u32, s as u32, image::imageops::FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => bail!(Config, "unsupported channel count {c} (use 1 or 3)"),
    };
    let mut planar = vec![0u8; interleaved.len()];
    for (i, px) in interleaved.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * w * h + i] = v;
        }
    }
    Ok((planar, h, w))
}

/// Reads `root/<class>/<file>` (classes sorted lexicographically) or, when
/// `root` holds image files directly, a single unlabelled class.
pub fn load_image_folder(root: &Path, channels: usize, size: Option<usize>) -> Result<Dataset> {
    let entries = sorted_entries(root)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut groups: Vec<(String, Vec<PathBuf>)> = Vec::new();
    if class_dirs.is_empty() {
        groups.push((String::new(), entries.iter().filter(|p| is_image(p)).cloned().collect()));
    } else {
        for dir in class_dirs {
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let files = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
            groups.push((name, files));
        }
    }
    let mut ds = Dataset { channels, class_count: groups.len(), ..Default::default() };
    for (label, (name, files)) in groups.into_iter().enumerate() {
        ds.class_names.push(name);
        for f in files {
            let (px, h, w) = load_image(&f, channels, size)?;
            if ds.images.is_empty() {
                ds.height = h;
                ds.width = w;
            } else if (h, w) != (ds.height, ds.width) {
                bail!(Input, "{} is {w}x{h}, earlier images are {}x{}; pass a resize size", f.display(), ds.width, ds.height);
            }
            ds.images.push(px);
            ds.labels.push(label);
        }
    }
    if ds.is_empty() {
        bail!(Input, "no PNG or PPM images under {}", root.display());
    }
    Ok(ds)
}

/// Mirrors a channel-planar image along its width.
pub fn flip_horizontal(image: &mut [u8], width: usize) {
    for row in image.chunks_mut(width) {
        row.reverse();
    }
}
