use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::data::unit_to_byte;
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Pixels between grid cells.
pub const GRID_PAD: usize = 2;

fn to_image(planar: &[f32], c: usize, h: usize, w: usize) -> Result<DynamicImage> {
    let plane = h * w;
    let mut interleaved = vec![0u8; planar.len()];
    for (i, &v) in planar.iter().enumerate() {
        interleaved[(i % plane) * c + i / plane] = unit_to_byte(v);
    }
    let (w, h) = (w as u32, h as u32);
    let img = match c {
        1 => GrayImage::from_raw(w, h, interleaved).map(DynamicImage::ImageLuma8),
        3 => RgbImage::from_raw(w, h, interleaved).map(DynamicImage::ImageRgb8),
        _ => bail!(Dimension, "cannot write {c}-channel images"),
    };
    img.ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))
}

fn save(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Writes every image of a [0, 1] tensor [N, C, H, W] as `<dir>/<prefix>NNNNN.png`.
pub fn save_images(images: &Tensor<f32>, dir: &Path, prefix: &str) -> Result<Vec<String>> {
    let [n, c, h, w] = dims(images)?;
    let per = c * h * w;
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("{prefix}{i:05}.png");
        save(&to_image(&images.data()[i * per..(i + 1) * per], c, h, w)?, &dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

fn dims(images: &Tensor<f32>) -> Result<[usize; 4]> {
    if images.rank() != 4 {
        bail!(Dimension, "expected [N, C, H, W], got {:?}", images.shape());
    }
    Ok([images.dim(0), images.dim(1), images.dim(2), images.dim(3)])
}

/// Tiles the images row-major into a grid of `cols` columns on a black background.
pub fn grid(images: &Tensor<f32>, cols: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = dims(images)?;
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let gh = rows * h + (rows + 1) * GRID_PAD;
    let gw = cols * w + (cols + 1) * GRID_PAD;
    let mut out = vec![0.0f32; c * gh * gw];
    let src = images.data();
    for i in 0..n {
        let (y0, x0) = (GRID_PAD + (i / cols) * (h + GRID_PAD), GRID_PAD + (i % cols) * (w + GRID_PAD));
        for ch in 0..c {
            for y in 0..h {
                let s = ((i * c + ch) * h + y) * w;
                let d = (ch * gh + y0 + y) * gw + x0;
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Tensor::from_vec(out, &[1, c, gh, gw])
}

pub fn save_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let g = grid(images, cols)?;
    let [_, c, h, w] = dims(&g)?;
    save(&to_image(g.data(), c, h, w)?, path)
}

/// Columns for a near-square grid.
pub fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil().max(1.0) as usize
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
