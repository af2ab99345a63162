use crate::error::Result;
use crate::nn::{join, Conv2d, GroupNorm, Linear, Module};
use crate::tensor::{Conv2dOptions, Float, Rng, Tensor};

/// GroupNorm → SiLU → Conv → (+ time projection) → GroupNorm → SiLU →
/// Dropout → Conv, added to a (1×1-projected when widths differ) skip,
/// optionally followed by self-attention.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Float> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub temb_proj: Linear<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
    pub attn: Option<AttnBlock<T>>,
    pub dropout: f64,
}

impl<T: Float> ResBlock<T> {
    pub fn new(cin: usize, cout: usize, temb_dim: usize, dropout: f64, attn: bool, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(cin),
            conv1: Conv2d::new(cin, cout, 3, Conv2dOptions::same3x3(), rng),
            temb_proj: Linear::new(temb_dim, cout, rng),
            norm2: GroupNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, Conv2dOptions::same3x3(), rng),
            shortcut: (cin != cout).then(|| Conv2d::new(cin, cout, 1, Conv2dOptions::default(), rng)),
            attn: attn.then(|| AttnBlock::new(cout, rng)),
            dropout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, temb: &Tensor<T>, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu())?;
        let h = h.add_per_channel(&self.temb_proj.forward(&temb.silu())?)?;
        let mut h = self.norm2.forward(&h)?.silu();
        if let Some(rng) = rng {
            h = h.dropout(self.dropout, rng)?;
        }
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        let out = skip.add(&h)?;
        match &self.attn {
            Some(a) => a.forward(&out),
            None => Ok(out),
        }
    }
}

impl<T: Float> Module<T> for ResBlock<T> {
    fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm1.visit_params(&join(p, "norm1"), f);
        self.conv1.visit_params(&join(p, "conv1"), f);
        self.temb_proj.visit_params(&join(p, "temb_proj"), f);
        self.norm2.visit_params(&join(p, "norm2"), f);
        self.conv2.visit_params(&join(p, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit_params(&join(p, "shortcut"), f);
        }
        if let Some(a) = &self.attn {
            a.visit_params(&join(p, "attn"), f);
        }
    }

    fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_params_mut(&join(p, "norm1"), f);
        self.conv1.visit_params_mut(&join(p, "conv1"), f);
        self.temb_proj.visit_params_mut(&join(p, "temb_proj"), f);
        self.norm2.visit_params_mut(&join(p, "norm2"), f);
        self.conv2.visit_params_mut(&join(p, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(&join(p, "shortcut"), f);
        }
        if let Some(a) = &mut self.attn {
            a.visit_params_mut(&join(p, "attn"), f);
        }
    }
}

/// Single-head self-attention over flattened spatial positions, residual.
#[derive(Clone, Debug)]
pub struct AttnBlock<T: Float> {
    pub norm: GroupNorm<T>,
    pub q: Conv2d<T>,
    pub k: Conv2d<T>,
    pub v: Conv2d<T>,
    pub proj: Conv2d<T>,
}

impl<T: Float> AttnBlock<T> {
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        let pw = Conv2dOptions::default();
        Self {
            norm: GroupNorm::new(ch),
            q: Conv2d::new(ch, ch, 1, pw, rng),
            k: Conv2d::new(ch, ch, 1, pw, rng),
            v: Conv2d::new(ch, ch, 1, pw, rng),
            proj: Conv2d::new(ch, ch, 1, pw, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, hh, ww) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let s = hh * ww;
        let h = self.norm.forward(x)?;
        let q = self.q.forward(&h)?.reshape(&[n, c, s])?;
        let k = self.k.forward(&h)?.reshape(&[n, c, s])?;
        let v = self.v.forward(&h)?.reshape(&[n, c, s])?;
        // scores[i, j] = <q_i, k_j> / sqrt(C)
        let scores = q
            .transpose_last()?
            .bmm(&k)?
            .mul_scalar(T::lit(1.0 / (c as f64).sqrt()));
        let weights = scores.softmax()?;
        let out = v.bmm(&weights.transpose_last()?)?.reshape(&[n, c, hh, ww])?;
        x.add(&self.proj.forward(&out)?)
    }
}

impl<T: Float> Module<T> for AttnBlock<T> {
    fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm.visit_params(&join(p, "norm"), f);
        self.q.visit_params(&join(p, "q"), f);
        self.k.visit_params(&join(p, "k"), f);
        self.v.visit_params(&join(p, "v"), f);
        self.proj.visit_params(&join(p, "proj"), f);
    }

    fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm.visit_params_mut(&join(p, "norm"), f);
        self.q.visit_params_mut(&join(p, "q"), f);
        self.k.visit_params_mut(&join(p, "k"), f);
        self.v.visit_params_mut(&join(p, "v"), f);
        self.proj.visit_params_mut(&join(p, "proj"), f);
    }
}

/// Stride-2 3×3 convolution; the input is zero-padded by one row and column
/// at the bottom/right so even sizes halve exactly.
#[derive(Clone, Debug)]
pub struct Downsample<T: Float> {
    pub conv: Conv2d<T>,
}

impl<T: Float> Downsample<T> {
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(ch, ch, 3, Conv2dOptions { stride: 2, pad: 0 }, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&x.pad2d(0, 1, 0, 1)?)
    }
}

/// Nearest ×2 followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample<T: Float> {
    pub conv: Conv2d<T>,
}

impl<T: Float> Upsample<T> {
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(ch, ch, 3, Conv2dOptions::same3x3(), rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&x.upsample_nearest2x()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randomize;

    /// Spatial permutation of an [N, C, H, W] tensor (flattened positions).
    fn permute(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let s = perm.len();
        let mut out = vec![0.0; x.numel()];
        for (plane, src) in x.data().chunks(s).enumerate() {
            for (i, &p) in perm.iter().enumerate() {
                out[plane * s + i] = src[p];
            }
        }
        Tensor::from_vec(out, x.shape()).unwrap()
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = Rng::new(3);
        let mut block = AttnBlock::<f64>::new(4, &mut rng);
        randomize(&mut block, 0.5, &mut rng);
        let x = Tensor::<f64>::random_normal(&[2, 4, 3, 3], &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let a = permute(&block.forward(&x).unwrap(), &perm);
        let b = block.forward(&permute(&x, &perm)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn resblock_shapes() {
        let mut rng = Rng::new(1);
        let block = ResBlock::<f32>::new(8, 16, 32, 0.1, true, &mut rng);
        let x = Tensor::random_normal(&[2, 8, 4, 4], &mut rng);
        let temb = Tensor::random_normal(&[2, 32], &mut rng);
        let y = block.forward(&x, &temb, Some(&mut rng)).unwrap();
        assert_eq!(y.shape(), &[2, 16, 4, 4]);
        assert!(block.shortcut.is_some());
    }

    #[test]
    fn down_and_up_halve_and_double() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::random_normal(&[1, 4, 8, 8], &mut rng);
        let d = Downsample::new(4, &mut rng).forward(&x).unwrap();
        assert_eq!(d.shape(), &[1, 4, 4, 4]);
        let u = Upsample::new(4, &mut rng).forward(&d).unwrap();
        assert_eq!(u.shape(), &[1, 4, 8, 8]);
    }
}
