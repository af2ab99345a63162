//! Encoder–bottleneck–decoder noise predictor with skip concatenation.

mod blocks;

pub use blocks::{AttnBlock, Downsample, ResBlock, Upsample};

use crate::error::{bail, Result};
use crate::model::NoisePredictor;
use crate::nn::{join, Conv2d, Embedding, GroupNorm, Linear, Module};
use crate::tensor::{Conv2dOptions, Float, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_size: usize,
    pub in_ch: usize,
    pub base_ch: usize,
    pub ch_mult: Vec<usize>,
    pub num_res_blocks: usize,
    pub attn_levels: Vec<usize>,
    pub dropout: f64,
    /// Embedding rows, including the trailing null class; 0 = unconditional.
    pub num_classes: usize,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_size: 32,
            in_ch: 3,
            base_ch: 64,
            ch_mult: vec![1, 2, 4, 4],
            num_res_blocks: 3,
            attn_levels: vec![2, 3],
            dropout: 0.1,
            num_classes: 0,
            time_embed_dim: 256,
        }
    }
}

impl UNetConfig {
    /// Small network for tests and quick experiments.
    pub fn tiny(in_size: usize, in_ch: usize) -> Self {
        Self {
            in_size,
            in_ch,
            base_ch: 8,
            ch_mult: vec![1, 2],
            num_res_blocks: 1,
            attn_levels: vec![1],
            dropout: 0.0,
            num_classes: 0,
            time_embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ch_mult.is_empty() || self.ch_mult.contains(&0) {
            bail!(Config, "unet_ch_mult must be a non-empty list of positive integers");
        }
        if self.in_size == 0 || self.in_ch == 0 || self.base_ch == 0 || self.time_embed_dim == 0 {
            bail!(Config, "unet sizes must be positive");
        }
        if !self.base_ch.is_multiple_of(2) {
            bail!(Config, "unet_ch must be even (got {})", self.base_ch);
        }
        let factor = 1usize << (self.ch_mult.len() - 1);
        if !self.in_size.is_multiple_of(factor) {
            bail!(
                Config,
                "unet_in_size {} is not divisible by 2^{} for {} levels",
                self.in_size,
                self.ch_mult.len() - 1,
                self.ch_mult.len()
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "unet_dropout must be in [0, 1), got {}", self.dropout);
        }
        if let Some(&bad) = self.attn_levels.iter().find(|&&l| l >= self.ch_mult.len()) {
            bail!(Config, "attention level {bad} out of range for {} levels", self.ch_mult.len());
        }
        if self.num_classes == 1 {
            bail!(Config, "num_classes must be 0 or at least 2 (one row is the null class)");
        }
        Ok(())
    }

    pub fn null_class(&self) -> Option<usize> {
        (self.num_classes > 0).then(|| self.num_classes - 1)
    }
}

/// Raw sinusoidal features for each timestep, shape [N, dim].
pub fn time_embedding<T: Float>(timesteps: &[usize], dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        bail!(Config, "time embedding dimension must be even, got {dim}");
    }
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..dim / 2 {
            let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let arg = t as f64 * omega;
            out.push(T::lit(arg.sin()));
            out.push(T::lit(arg.cos()));
        }
    }
    Tensor::from_vec(out, &[timesteps.len(), dim])
}

#[derive(Clone, Debug)]
enum Down<T: Float> {
    Res(ResBlock<T>),
    Sample(Downsample<T>),
}

#[derive(Clone, Debug)]
enum Up<T: Float> {
    Res(ResBlock<T>),
    Sample(Upsample<T>),
}

#[derive(Clone, Debug)]
pub struct UNet<T: Float = f32> {
    cfg: UNetConfig,
    temb1: Linear<T>,
    temb2: Linear<T>,
    class_emb: Option<Embedding<T>>,
    head: Conv2d<T>,
    down: Vec<Down<T>>,
    mid: [ResBlock<T>; 2],
    up: Vec<Up<T>>,
    tail_norm: GroupNorm<T>,
    tail: Conv2d<T>,
}

impl<T: Float> UNet<T> {
    pub fn new(cfg: UNetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.base_ch;
        let tdim = cfg.time_embed_dim;
        let p = cfg.dropout;
        let head = Conv2d::new(cfg.in_ch, ch, 3, Conv2dOptions::same3x3(), rng);

        let mut skips = vec![ch];
        let mut cur = ch;
        let mut down = Vec::new();
        for (level, &mult) in cfg.ch_mult.iter().enumerate() {
            let out = ch * mult;
            let attn = cfg.attn_levels.contains(&level);
            for _ in 0..cfg.num_res_blocks {
                down.push(Down::Res(ResBlock::new(cur, out, tdim, p, attn, rng)));
                cur = out;
                skips.push(cur);
            }
            if level + 1 < cfg.ch_mult.len() {
                down.push(Down::Sample(Downsample::new(cur, rng)));
                skips.push(cur);
            }
        }

        let mid = [
            ResBlock::new(cur, cur, tdim, p, true, rng),
            ResBlock::new(cur, cur, tdim, p, false, rng),
        ];

        let mut up = Vec::new();
        for (level, &mult) in cfg.ch_mult.iter().enumerate().rev() {
            let out = ch * mult;
            let attn = cfg.attn_levels.contains(&level);
            for _ in 0..=cfg.num_res_blocks {
                let skip = skips.pop().expect("skip stack matches block count");
                up.push(Up::Res(ResBlock::new(cur + skip, out, tdim, p, attn, rng)));
                cur = out;
            }
            if level > 0 {
                up.push(Up::Sample(Upsample::new(cur, rng)));
            }
        }
        debug_assert!(skips.is_empty());

        Ok(Self {
            temb1: Linear::new(ch, tdim, rng),
            temb2: Linear::new(tdim, tdim, rng),
            class_emb: (cfg.num_classes > 0).then(|| Embedding::new(cfg.num_classes, tdim, rng)),
            head,
            down,
            mid,
            up,
            tail_norm: GroupNorm::new(cur),
            tail: Conv2d::zeroed(cur, cfg.in_ch, 3, Conv2dOptions::same3x3()),
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn check_inputs(&self, x: &Tensor<T>, timesteps: &[usize], labels: Option<&[usize]>) -> Result<()> {
        let c = &self.cfg;
        let want = [x.shape().first().copied().unwrap_or(0), c.in_ch, c.in_size, c.in_size];
        if x.shape() != want {
            bail!(Dimension, "unet expects input [N, {}, {}, {}], got {:?}", c.in_ch, c.in_size, c.in_size, x.shape());
        }
        if timesteps.len() != want[0] {
            bail!(Dimension, "{} timesteps for a batch of {}", timesteps.len(), want[0]);
        }
        match (labels, c.num_classes) {
            (None, 0) => {}
            (Some(_), 0) => bail!(Input, "labels given to an unconditional model"),
            (None, _) => bail!(Input, "class-conditional model requires labels"),
            (Some(l), k) => {
                if l.len() != want[0] {
                    bail!(Dimension, "{} labels for a batch of {}", l.len(), want[0]);
                }
                if let Some(bad) = l.iter().find(|&&v| v >= k) {
                    bail!(Input, "label {bad} out of range for {k} classes");
                }
            }
        }
        Ok(())
    }

    /// `dropout` enables training-mode dropout when given.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        timesteps: &[usize],
        labels: Option<&[usize]>,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Tensor<T>> {
        self.check_inputs(x, timesteps, labels)?;
        let raw = time_embedding::<T>(timesteps, self.cfg.base_ch)?;
        let mut temb = self.temb2.forward(&self.temb1.forward(&raw)?.silu())?;
        if let (Some(table), Some(l)) = (&self.class_emb, labels) {
            temb = temb.add(&table.forward(l)?)?;
        }

        let mut h = self.head.forward(x)?;
        let mut hs = vec![h.clone()];
        for block in &self.down {
            h = match block {
                Down::Res(r) => r.forward(&h, &temb, dropout.as_deref_mut())?,
                Down::Sample(d) => d.forward(&h)?,
            };
            hs.push(h.clone());
        }
        for r in &self.mid {
            h = r.forward(&h, &temb, dropout.as_deref_mut())?;
        }
        for block in &self.up {
            h = match block {
                Up::Res(r) => {
                    let skip = hs.pop().expect("skip stack matches block count");
                    r.forward(&Tensor::cat_channels(&[&h, &skip])?, &temb, dropout.as_deref_mut())?
                }
                Up::Sample(u) => u.forward(&h)?,
            };
        }
        self.tail.forward(&self.tail_norm.forward(&h)?.silu())
    }
}

impl<T: Float> Module<T> for UNet<T> {
    fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.temb1.visit_params(&join(p, "temb.0"), f);
        self.temb2.visit_params(&join(p, "temb.1"), f);
        if let Some(e) = &self.class_emb {
            e.visit_params(&join(p, "class_emb"), f);
        }
        self.head.visit_params(&join(p, "head"), f);
        for (i, b) in self.down.iter().enumerate() {
            let name = join(p, &format!("down.{i}"));
            match b {
                Down::Res(r) => r.visit_params(&name, f),
                Down::Sample(d) => d.conv.visit_params(&name, f),
            }
        }
        for (i, r) in self.mid.iter().enumerate() {
            r.visit_params(&join(p, &format!("mid.{i}")), f);
        }
        for (i, b) in self.up.iter().enumerate() {
            let name = join(p, &format!("up.{i}"));
            match b {
                Up::Res(r) => r.visit_params(&name, f),
                Up::Sample(u) => u.conv.visit_params(&name, f),
            }
        }
        self.tail_norm.visit_params(&join(p, "tail.norm"), f);
        self.tail.visit_params(&join(p, "tail.conv"), f);
    }

    fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.temb1.visit_params_mut(&join(p, "temb.0"), f);
        self.temb2.visit_params_mut(&join(p, "temb.1"), f);
        if let Some(e) = &mut self.class_emb {
            e.visit_params_mut(&join(p, "class_emb"), f);
        }
        self.head.visit_params_mut(&join(p, "head"), f);
        for (i, b) in self.down.iter_mut().enumerate() {
            let name = join(p, &format!("down.{i}"));
            match b {
                Down::Res(r) => r.visit_params_mut(&name, f),
                Down::Sample(d) => d.conv.visit_params_mut(&name, f),
            }
        }
        for (i, r) in self.mid.iter_mut().enumerate() {
            r.visit_params_mut(&join(p, &format!("mid.{i}")), f);
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            let name = join(p, &format!("up.{i}"));
            match b {
                Up::Res(r) => r.visit_params_mut(&name, f),
                Up::Sample(u) => u.conv.visit_params_mut(&name, f),
            }
        }
        self.tail_norm.visit_params_mut(&join(p, "tail.norm"), f);
        self.tail.visit_params_mut(&join(p, "tail.conv"), f);
    }
}

impl<T: Float> NoisePredictor<T> for UNet<T> {
    fn predict_noise(
        &self,
        x: &Tensor<T>,
        timesteps: &[usize],
        labels: Option<&[usize]>,
        dropout: Option<&mut Rng>,
    ) -> Result<Tensor<T>> {
        self.forward(x, timesteps, labels, dropout)
    }

    fn null_class(&self) -> Option<usize> {
        self.cfg.null_class()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;
    use crate::nn::randomize;
    use crate::Error;
    use std::collections::HashSet;

    #[test]
    fn raw_embedding_at_zero_alternates() {
        let e = time_embedding::<f64>(&[0], 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn raw_embedding_matches_trig() {
        let dim = 16;
        let e = time_embedding::<f32>(&[37], dim).unwrap();
        for i in 0..dim / 2 {
            let w = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
            assert!((e.data()[2 * i] as f64 - (37.0 * w).sin()).abs() < 1e-6);
            assert!((e.data()[2 * i + 1] as f64 - (37.0 * w).cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn adjacent_steps_differ_widely() {
        let dim = 32;
        let e = time_embedding::<f64>(&[1, 2], dim).unwrap();
        let d = e.data();
        let differ = (0..dim).filter(|&i| d[i] != d[dim + i]).count();
        assert!(differ >= dim / 2);
    }

    #[test]
    fn odd_dim_is_config_error() {
        assert!(matches!(time_embedding::<f32>(&[1], 7), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let bad = |f: fn(&mut UNetConfig)| {
            let mut c = UNetConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.in_size = 36));
        assert!(bad(|c| c.dropout = 1.0));
        assert!(bad(|c| c.attn_levels = vec![4]));
        assert!(bad(|c| c.ch_mult.clear()));
    }

    #[test]
    fn reference_config_has_about_35m_params() {
        let net = UNet::<f32>::new(UNetConfig::default(), &mut Rng::new(0)).unwrap();
        let n = net.param_count();
        assert!((31_500_000..=38_500_000).contains(&n), "{n}");
        // Independent tally of the same wiring.
        assert_eq!(n, 35_173_443);
        let names: HashSet<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), net.named_params().len());
    }

    #[test]
    fn output_shape_and_zero_init() {
        let mut rng = Rng::new(4);
        let net = UNet::<f32>::new(UNetConfig::tiny(8, 3), &mut rng).unwrap();
        let x = Tensor::random_normal(&[2, 3, 8, 8], &mut rng);
        let y = net.forward(&x, &[5, 900], None, None).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_batch_consistent() {
        let mut rng = Rng::new(5);
        let mut net = UNet::<f32>::new(UNetConfig::tiny(8, 1), &mut rng).unwrap();
        randomize(&mut net, 0.2, &mut rng);
        let x = Tensor::random_normal(&[1, 1, 8, 8], &mut rng);
        let a = net.forward(&x, &[10], None, None).unwrap();
        let b = net.forward(&x, &[10], None, None).unwrap();
        assert_eq!(a.data(), b.data());
        let xx = Tensor::cat_batch(&[&x, &x]).unwrap();
        let yy = net.forward(&xx, &[10, 10], None, None).unwrap();
        assert_eq!(&yy.data()[..64], &yy.data()[64..]);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn label_contract() {
        let mut rng = Rng::new(6);
        let cfg = UNetConfig { num_classes: 3, ..UNetConfig::tiny(4, 1) };
        let net = UNet::<f32>::new(cfg, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 1, 4, 4]);
        assert_eq!(net.null_class(), Some(2));
        assert!(net.forward(&x, &[0, 1], Some(&[0, 2]), None).is_ok());
        assert!(matches!(net.forward(&x, &[0, 1], Some(&[0, 3]), None), Err(Error::Input(_))));
        assert!(matches!(net.forward(&x, &[0, 1], None, None), Err(Error::Input(_))));
    }

    #[test]
    fn labels_change_the_output() {
        let mut rng = Rng::new(7);
        let cfg = UNetConfig { num_classes: 3, ..UNetConfig::tiny(4, 1) };
        let mut net = UNet::<f32>::new(cfg, &mut rng).unwrap();
        randomize(&mut net, 0.2, &mut rng);
        let x = Tensor::random_normal(&[1, 1, 4, 4], &mut rng);
        let a = net.forward(&x, &[3], Some(&[0]), None).unwrap();
        let b = net.forward(&x, &[3], Some(&[1]), None).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let cfg = UNetConfig { base_ch: 8, ch_mult: vec![1, 2], num_res_blocks: 1, attn_levels: vec![1], ..UNetConfig::tiny(4, 1) };
        let mut net = UNet::<f64>::new(cfg, &mut rng).unwrap();
        randomize(&mut net, 0.3, &mut rng);
        let x = Tensor::<f64>::random_normal(&[2, 1, 4, 4], &mut rng);
        let target = Tensor::<f64>::random_normal(&[2, 1, 4, 4], &mut rng);
        let report = check_module(
            &mut net,
            |m| Ok(m.forward(&x, &[3, 70], None, None)?.sub(&target)?.square().mean()),
            24,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }
}
