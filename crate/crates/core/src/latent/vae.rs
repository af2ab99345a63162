use crate::error::{bail, Result};
use crate::nn::{join, Conv2d, Module};
use crate::optim::AdamW;
use crate::tensor::{no_grad, Conv2dOptions, Float, Rng, Tensor};
use crate::unet::{Downsample, Upsample};

use super::LatentCodec;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub in_ch: usize,
    pub ch: usize,
    pub latent_channels: usize,
    /// Spatial downsampling factor, a power of two.
    pub factor: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { in_ch: 3, ch: 32, latent_channels: 4, factor: 4 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() {
            bail!(Config, "latent_factor must be a power of two, got {}", self.factor);
        }
        if self.in_ch == 0 || self.ch == 0 || self.latent_channels == 0 {
            bail!(Config, "vae channel counts must be positive");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

/// Small convolutional VAE. Each level halves (or doubles) the resolution.
#[derive(Clone, Debug)]
pub struct Vae<T: Float = f32> {
    cfg: VaeConfig,
    enc_in: Conv2d<T>,
    enc_down: Vec<(Downsample<T>, Conv2d<T>)>,
    enc_mu: Conv2d<T>,
    enc_logvar: Conv2d<T>,
    dec_in: Conv2d<T>,
    dec_up: Vec<(Upsample<T>, Conv2d<T>)>,
    dec_out: Conv2d<T>,
    /// Multiplier applied to μ so that encoded latents have unit variance.
    pub latent_scale: f64,
}

impl<T: Float> Vae<T> {
    pub fn new(cfg: VaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let same = Conv2dOptions::same3x3();
        let ch = cfg.ch;
        let enc_in = Conv2d::new(cfg.in_ch, ch, 3, same, rng);
        let enc_down = (0..cfg.levels())
            .map(|_| (Downsample::new(ch, rng), Conv2d::new(ch, ch, 3, same, rng)))
            .collect();
        let enc_mu = Conv2d::new(ch, cfg.latent_channels, 3, same, rng);
        let mut enc_logvar = Conv2d::new(ch, cfg.latent_channels, 3, same, rng);
        // Start with small posterior variance so early reconstructions are not swamped by noise.
        enc_logvar.weight.update_data(|d| d.iter_mut().for_each(|v| *v *= T::lit(0.1)));
        enc_logvar.bias.update_data(|d| d.iter_mut().for_each(|v| *v = T::lit(-4.0)));
        let dec_in = Conv2d::new(cfg.latent_channels, ch, 3, same, rng);
        let dec_up = (0..cfg.levels())
            .map(|_| (Upsample::new(ch, rng), Conv2d::new(ch, ch, 3, same, rng)))
            .collect();
        let dec_out = Conv2d::new(ch, cfg.in_ch, 3, same, rng);
        Ok(Self { cfg, enc_in, enc_down, enc_mu, enc_logvar, dec_in, dec_up, dec_out, latent_scale: 1.0 })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        let f = self.cfg.factor;
        if x.rank() != 4 || x.dim(1) != self.cfg.in_ch || !x.dim(2).is_multiple_of(f) || !x.dim(3).is_multiple_of(f) {
            bail!(
                Dimension,
                "vae expects [N, {}, H, W] with H and W divisible by {f}, got {:?}",
                self.cfg.in_ch,
                x.shape()
            );
        }
        Ok(())
    }

    /// Posterior parameters (μ, log σ²), unscaled.
    pub fn encode_stats(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_image(x)?;
        let mut h = self.enc_in.forward(x)?.silu();
        for (down, conv) in &self.enc_down {
            h = conv.forward(&down.forward(&h)?.silu())?.silu();
        }
        Ok((self.enc_mu.forward(&h)?, self.enc_logvar.forward(&h)?))
    }

    /// Decodes unscaled latents.
    pub fn decode_raw(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.rank() != 4 || z.dim(1) != self.cfg.latent_channels {
            bail!(Dimension, "vae decoder expects [N, {}, h, w], got {:?}", self.cfg.latent_channels, z.shape());
        }
        let mut h = self.dec_in.forward(z)?.silu();
        for (up, conv) in &self.dec_up {
            h = conv.forward(&up.forward(&h)?.silu())?.silu();
        }
        self.dec_out.forward(&h)
    }
}

impl<T: Float> LatentCodec<T> for Vae<T> {
    fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mu, _) = self.encode_stats(x)?;
        Ok(mu.mul_scalar(T::lit(self.latent_scale)))
    }

    fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_raw(&z.mul_scalar(T::lit(1.0 / self.latent_scale)))
    }

    fn factor(&self) -> usize {
        self.cfg.factor
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }
}

impl<T: Float> Module<T> for Vae<T> {
    fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.enc_in.visit_params(&join(p, "enc.in"), f);
        for (i, (d, c)) in self.enc_down.iter().enumerate() {
            d.conv.visit_params(&join(p, &format!("enc.down.{i}")), f);
            c.visit_params(&join(p, &format!("enc.conv.{i}")), f);
        }
        self.enc_mu.visit_params(&join(p, "enc.mu"), f);
        self.enc_logvar.visit_params(&join(p, "enc.logvar"), f);
        self.dec_in.visit_params(&join(p, "dec.in"), f);
        for (i, (u, c)) in self.dec_up.iter().enumerate() {
            u.conv.visit_params(&join(p, &format!("dec.up.{i}")), f);
            c.visit_params(&join(p, &format!("dec.conv.{i}")), f);
        }
        self.dec_out.visit_params(&join(p, "dec.out"), f);
    }

    fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.enc_in.visit_params_mut(&join(p, "enc.in"), f);
        for (i, (d, c)) in self.enc_down.iter_mut().enumerate() {
            d.conv.visit_params_mut(&join(p, &format!("enc.down.{i}")), f);
            c.visit_params_mut(&join(p, &format!("enc.conv.{i}")), f);
        }
        self.enc_mu.visit_params_mut(&join(p, "enc.mu"), f);
        self.enc_logvar.visit_params_mut(&join(p, "enc.logvar"), f);
        self.dec_in.visit_params_mut(&join(p, "dec.in"), f);
        for (i, (u, c)) in self.dec_up.iter_mut().enumerate() {
            u.conv.visit_params_mut(&join(p, &format!("dec.up.{i}")), f);
            c.visit_params_mut(&join(p, &format!("dec.conv.{i}")), f);
        }
        self.dec_out.visit_params_mut(&join(p, "dec.out"), f);
    }
}

/// z = μ + exp(log σ² / 2)·ε with ε ~ N(0, I).
pub fn reparameterize<T: Float>(mu: &Tensor<T>, logvar: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    if mu.shape() != logvar.shape() {
        bail!(Dimension, "reparameterize: {:?} vs {:?}", mu.shape(), logvar.shape());
    }
    let eps = Tensor::random_normal(mu.shape(), rng);
    logvar.mul_scalar(T::lit(0.5)).exp().mul(&eps)?.add(mu)
}

/// KL(q ‖ N(0, I)) summed over latent elements, averaged over the batch.
pub fn kl_divergence<T: Float>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<Tensor<T>> {
    if mu.shape() != logvar.shape() || mu.rank() == 0 {
        bail!(Dimension, "kl_divergence: {:?} vs {:?}", mu.shape(), logvar.shape());
    }
    let n = mu.dim(0) as f64;
    let inner = logvar.add_scalar(T::one()).sub(&mu.square())?.sub(&logvar.exp())?;
    Ok(inner.sum().mul_scalar(T::lit(-0.5 / n)))
}

/// Reconstruction MSE and β-weighted KL for one batch.
pub fn vae_loss<T: Float>(vae: &Vae<T>, x: &Tensor<T>, beta_kl: f64, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (mu, logvar) = vae.encode_stats(x)?;
    let z = reparameterize(&mu, &logvar, rng)?;
    let recon = vae.decode_raw(&z)?.sub(x)?.square().mean();
    let kl = kl_divergence(&mu, &logvar)?;
    let total = recon.add(&kl.mul_scalar(T::lit(beta_kl)))?;
    Ok((total, recon, kl))
}

/// One optimizer update on recon + β·KL; returns (recon, kl) before the update.
pub fn vae_train_step<T: Float>(vae: &mut Vae<T>, x: &Tensor<T>, beta_kl: f64, opt: &mut AdamW<T>, rng: &mut Rng) -> Result<(f64, f64)> {
    vae.zero_grad();
    let (total, recon, kl) = vae_loss(vae, x, beta_kl, rng)?;
    let (r, k) = (recon.item()?.as_f64(), kl.item()?.as_f64());
    if !(r.is_finite() && k.is_finite()) {
        bail!(Numeric, "non-finite vae loss (recon {r}, kl {k}) at step {}", opt.step_count() + 1);
    }
    total.backward()?;
    opt.step(vae)?;
    Ok((r, k))
}

/// Sets `latent_scale` to 1/std of the posterior means over `images`.
pub fn fit_latent_scale<'a, T: Float>(vae: &mut Vae<T>, images: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<f64> {
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for x in images {
        let (mu, _) = no_grad(|| vae.encode_stats(x))?;
        for &v in mu.data() {
            let v = v.as_f64();
            sum += v;
            sq += v * v;
            n += 1;
        }
    }
    if n < 2 {
        bail!(Input, "need data to fit the latent scale");
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    vae.latent_scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    Ok(vae.latent_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;
    use crate::nn::randomize;
    use crate::Error;

    #[test]
    fn reparameterize_collapses_with_tiny_variance() {
        let mut rng = Rng::new(1);
        let mu = Tensor::<f64>::random_normal(&[2, 3], &mut rng);
        let z = reparameterize(&mu, &Tensor::full(&[2, 3], -60.0), &mut rng).unwrap();
        for (a, b) in z.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reparameterize_moments_and_reproducibility() {
        let n = 10_000;
        let z = reparameterize(&Tensor::<f64>::zeros(&[n]), &Tensor::zeros(&[n]), &mut Rng::new(2)).unwrap();
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
        let again = reparameterize(&Tensor::<f64>::zeros(&[n]), &Tensor::zeros(&[n]), &mut Rng::new(2)).unwrap();
        assert_eq!(z.data(), again.data());
    }

    #[test]
    fn kl_known_values() {
        let zero = kl_divergence(&Tensor::<f64>::zeros(&[1, 4]), &Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(zero.item().unwrap(), 0.0);
        let one = kl_divergence(&Tensor::<f64>::ones(&[1, 1]), &Tensor::zeros(&[1, 1])).unwrap();
        assert!((one.item().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_scripted_sum_and_is_non_negative() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let mu = Tensor::<f64>::random_normal(&[3, 2, 2, 2], &mut rng);
            let lv = Tensor::<f64>::random_normal(&[3, 2, 2, 2], &mut rng);
            let got = kl_divergence(&mu, &lv).unwrap().item().unwrap();
            let mut want = 0.0;
            for (m, l) in mu.data().iter().zip(lv.data()) {
                want += -0.5 * (1.0 + l - m * m - l.exp());
            }
            want /= 3.0;
            assert!((got - want).abs() < 1e-6);
            assert!(got >= -1e-7);
        }
    }

    #[test]
    fn shapes_round_trip() {
        let mut rng = Rng::new(4);
        let vae = Vae::<f32>::new(VaeConfig { ch: 8, ..Default::default() }, &mut rng).unwrap();
        for size in [8usize, 16, 32] {
            let x = Tensor::random_normal(&[2, 3, size, size], &mut rng);
            let z = vae.encode(&x).unwrap();
            assert_eq!(z.shape(), &[2, 4, size / 4, size / 4]);
            assert_eq!(vae.decode(&z).unwrap().shape(), x.shape());
        }
        assert!(matches!(vae.encode(&Tensor::zeros(&[1, 3, 6, 6])), Err(Error::Dimension(_))));
        assert!(matches!(Vae::<f32>::new(VaeConfig { factor: 3, ..Default::default() }, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = Rng::new(5);
        let vae = Vae::<f32>::new(VaeConfig { ch: 8, ..Default::default() }, &mut rng).unwrap();
        let x = Tensor::random_normal(&[1, 3, 8, 8], &mut rng);
        assert_eq!(vae.encode(&x).unwrap().data(), vae.encode(&x).unwrap().data());
    }

    #[test]
    fn zero_kl_weight_is_plain_autoencoder_loss() {
        let mut rng = Rng::new(6);
        let vae = Vae::<f64>::new(VaeConfig { ch: 4, factor: 2, ..Default::default() }, &mut rng).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let (total, recon, _) = vae_loss(&vae, &x, 0.0, &mut Rng::new(9)).unwrap();
        assert_eq!(total.item().unwrap(), recon.item().unwrap());
        let (mu, lv) = vae.encode_stats(&x).unwrap();
        let z = reparameterize(&mu, &lv, &mut Rng::new(9)).unwrap();
        let dec = vae.decode_raw(&z).unwrap();
        let want = dec.data().iter().map(|v| v * v).sum::<f64>() / dec.numel() as f64;
        assert!((recon.item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let mut vae = Vae::<f64>::new(VaeConfig { in_ch: 1, ch: 4, latent_channels: 2, factor: 2 }, &mut rng).unwrap();
        randomize(&mut vae, 0.4, &mut rng);
        let x = Tensor::<f64>::random_normal(&[2, 1, 4, 4], &mut rng);
        let report = check_module(&mut vae, |v| Ok(vae_loss(v, &x, 0.5, &mut Rng::new(3))?.0), 24, 1e-5, &mut rng).unwrap();
        assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn latent_scale_normalises_variance() {
        let mut rng = Rng::new(8);
        let mut vae = Vae::<f32>::new(VaeConfig { ch: 8, ..Default::default() }, &mut rng).unwrap();
        let imgs: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::random_normal(&[4, 3, 8, 8], &mut rng)).collect();
        fit_latent_scale(&mut vae, &imgs).unwrap();
        let all: Vec<f64> = imgs.iter().flat_map(|x| vae.encode(x).unwrap().to_f64_vec()).collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
}
