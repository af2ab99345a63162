//! Reverse-process samplers: ancestral DDPM, DDIM and classifier-free guidance.

use std::fmt;
use std::str::FromStr;

use crate::data::Normalization;
use crate::error::{bail, Error, Result};
use crate::latent::LatentCodec;
use crate::model::NoisePredictor;
use crate::schedule::{ScheduleTable, ALPHA_BAR_FLOOR};
use crate::tensor::{no_grad, Float, Rng, Tensor};

/// RNG stream for initial noise and per-step noise.
pub const SAMPLE_STREAM: u64 = 0x7361_6d70_6c65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplerKind {
    Ddpm,
    #[default]
    Ddim,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ddpm => "ddpm",
            Self::Ddim => "ddim",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::Config(format!("sampler: unknown kind '{other}' (valid: ddpm, ddim)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub num_inference_steps: usize,
    pub eta: f64,
    pub guidance_weight: f64,
    pub seed: u64,
    /// Clamp the predicted clean sample to [−1, 1] before each step.
    pub clip_sample: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            num_inference_steps: 250,
            eta: 0.0,
            guidance_weight: 1.0,
            seed: 42,
            clip_sample: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, num_train_timesteps: usize) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > num_train_timesteps {
            bail!(
                Config,
                "num_inference_steps must be in [1, {num_train_timesteps}], got {}",
                self.num_inference_steps
            );
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            bail!(Config, "eta must be a non-negative number, got {}", self.eta);
        }
        if !self.guidance_weight.is_finite() {
            bail!(Config, "guidance_weight must be finite");
        }
        Ok(())
    }
}

/// Descending timesteps `(i+1)·⌊T/S⌋ − 1` for i = S−1 … 0.
pub fn select_timesteps(num_train_timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_train_timesteps {
        bail!(Config, "cannot select {steps} steps out of {num_train_timesteps}");
    }
    let stride = num_train_timesteps / steps;
    Ok((0..steps).rev().map(|i| (i + 1) * stride - 1).collect())
}

/// Affine form of one reverse step: x_prev = x_coef·x_t + eps_coef·ε̂ + sigma·z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub x_coef: f64,
    pub eps_coef: f64,
    pub sigma: f64,
}

/// DDPM step from `t` to `prev_t`; adjacent steps use the table's β_t and
/// fixed-small posterior variance, longer hops the equivalent α = ᾱ_t/ᾱ_prev.
pub fn ddpm_coefficients(table: &ScheduleTable, t: usize, prev_t: i64) -> Result<StepCoefficients> {
    table.check_timestep(t)?;
    let ab_t = table.alphas_cumprod[t];
    let ab_prev = table.alpha_bar(prev_t);
    let (alpha, var) = if prev_t == t as i64 - 1 {
        (table.alphas[t], table.posterior_variance(t))
    } else {
        let alpha = ab_t / ab_prev;
        (alpha, (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha))
    };
    let x_coef = 1.0 / alpha.sqrt();
    Ok(StepCoefficients {
        x_coef,
        eps_coef: -x_coef * (1.0 - alpha) / (1.0 - ab_t).sqrt(),
        sigma: if prev_t >= 0 { var.max(0.0).sqrt() } else { 0.0 },
    })
}

/// σ² of a DDIM hop, η·((1−ᾱ_prev)/(1−ᾱ_t))·(1−ᾱ_t/ᾱ_prev).
pub fn ddim_variance(table: &ScheduleTable, t: usize, prev_t: i64, eta: f64) -> f64 {
    let ab_t = table.alphas_cumprod[t];
    let ab_prev = table.alpha_bar(prev_t);
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev)
}

fn check_alpha_bar(ab: f64, t: usize) -> Result<()> {
    if !(ab >= 0.5 * ALPHA_BAR_FLOOR) {
        bail!(Numeric, "alpha_bar at t={t} is {ab:e}, below the floor {ALPHA_BAR_FLOOR:e}");
    }
    Ok(())
}

fn ddim_direction(table: &ScheduleTable, t: usize, prev_t: i64, eta: f64) -> Result<(f64, f64)> {
    let var = ddim_variance(table, t, prev_t, eta);
    let rest = 1.0 - table.alpha_bar(prev_t) - var;
    if rest < -1e-6 {
        bail!(Numeric, "schedule inconsistency at t={t}: 1 - alpha_bar_prev - sigma^2 = {rest:e}");
    }
    Ok((rest.max(0.0).sqrt(), var.max(0.0).sqrt()))
}

pub fn ddim_coefficients(table: &ScheduleTable, t: usize, prev_t: i64, eta: f64) -> Result<StepCoefficients> {
    table.check_timestep(t)?;
    let ab_t = table.alphas_cumprod[t];
    check_alpha_bar(ab_t, t)?;
    let ab_prev = table.alpha_bar(prev_t);
    let (dir, sigma) = ddim_direction(table, t, prev_t, eta)?;
    Ok(StepCoefficients {
        x_coef: (ab_prev / ab_t).sqrt(),
        eps_coef: dir - ab_prev.sqrt() * (1.0 - ab_t).sqrt() / ab_t.sqrt(),
        sigma,
    })
}

fn check_pair<T: Float>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

fn add_noise_term<T: Float>(mut x: Vec<T>, sigma: f64, rng: &mut Rng) -> Vec<T> {
    for v in &mut x {
        *v += T::lit(sigma * rng.normal());
    }
    x
}

/// One ancestral step x_t → x_{t−1}; no noise is added at t = 0.
pub fn ddpm_step<T: Float>(table: &ScheduleTable, eps: &Tensor<T>, t: usize, x_t: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    ddpm_step_to(table, eps, t, t as i64 - 1, x_t, rng)
}

/// Ancestral step over an arbitrary hop t → prev_t.
pub fn ddpm_step_to<T: Float>(
    table: &ScheduleTable,
    eps: &Tensor<T>,
    t: usize,
    prev_t: i64,
    x_t: &Tensor<T>,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    check_pair(eps, x_t, "ddpm_step")?;
    let c = ddpm_coefficients(table, t, prev_t)?;
    let mean: Vec<T> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| T::lit(c.x_coef * x.as_f64() + c.eps_coef * e.as_f64()))
        .collect();
    let out = if prev_t >= 0 { add_noise_term(mean, c.sigma, rng) } else { mean };
    Tensor::from_vec(out, x_t.shape())
}

/// Clean-sample estimate (x_t − sqrt(1−ᾱ_t)·ε̂)/sqrt(ᾱ_t).
pub fn ddim_pred_x0<T: Float>(table: &ScheduleTable, eps: &Tensor<T>, t: usize, x_t: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(eps, x_t, "ddim_pred_x0")?;
    table.check_timestep(t)?;
    let ab = table.alphas_cumprod[t];
    check_alpha_bar(ab, t)?;
    let (sa, sn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let data = x_t.data().iter().zip(eps.data()).map(|(&x, &e)| (x - sn * e) / sa).collect();
    Tensor::from_vec(data, x_t.shape())
}

/// Noise estimate consistent with the clean-sample estimate clamped to [−1, 1].
pub fn clip_noise<T: Float>(table: &ScheduleTable, eps: &Tensor<T>, t: usize, x_t: &Tensor<T>) -> Result<Tensor<T>> {
    let x0 = ddim_pred_x0(table, eps, t, x_t)?;
    let ab = table.alphas_cumprod[t];
    let (sa, sn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let (lo, hi) = (T::lit(-1.0), T::lit(1.0));
    let data = x_t
        .data()
        .iter()
        .zip(x0.data())
        .zip(eps.data())
        .map(|((&x, &c), &e)| if c < lo || c > hi { (x - sa * c.max(lo).min(hi)) / sn } else { e })
        .collect();
    Tensor::from_vec(data, x_t.shape())
}

/// Non-Markovian step through the predicted clean sample; deterministic at η = 0.
pub fn ddim_step<T: Float>(
    table: &ScheduleTable,
    eps: &Tensor<T>,
    t: usize,
    prev_t: i64,
    x_t: &Tensor<T>,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if prev_t >= t as i64 {
        bail!(Contract, "ddim_step: prev_t {prev_t} must precede t {t}");
    }
    let x0 = ddim_pred_x0(table, eps, t, x_t)?;
    let ab_prev = table.alpha_bar(prev_t);
    let (dir, sigma) = ddim_direction(table, t, prev_t, eta)?;
    let (sp, d) = (T::lit(ab_prev.sqrt()), T::lit(dir));
    let out: Vec<T> = x0.data().iter().zip(eps.data()).map(|(&x, &e)| sp * x + d * e).collect();
    let out = if eta > 0.0 && sigma > 0.0 { add_noise_term(out, sigma, rng) } else { out };
    Tensor::from_vec(out, x_t.shape())
}

/// ε_u + w·(ε_c − ε_u); elements where both agree are passed through untouched.
pub fn cfg_combine<T: Float>(uncond: &Tensor<T>, cond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    check_pair(uncond, cond, "cfg_combine")?;
    let w = T::lit(w);
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| if u == c { u } else { u + w * (c - u) })
        .collect();
    Tensor::from_vec(data, uncond.shape())
}

/// Noise estimate for one step, applying guidance when labels are given.
pub fn guided_noise<T: Float, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    timesteps: &[usize],
    labels: Option<&[usize]>,
    w: f64,
) -> Result<Tensor<T>> {
    let n = timesteps.len();
    match (model.null_class(), labels) {
        (None, None) => model.predict_noise(x, timesteps, None, None),
        (None, Some(_)) => bail!(Input, "labels given to an unconditional model"),
        (Some(null), None) => model.predict_noise(x, timesteps, Some(&vec![null; n]), None),
        (Some(null), Some(labels)) => {
            if w == 1.0 {
                return model.predict_noise(x, timesteps, Some(labels), None);
            }
            let uncond = model.predict_noise(x, timesteps, Some(&vec![null; n]), None)?;
            if w == 0.0 {
                return Ok(uncond);
            }
            let cond = model.predict_noise(x, timesteps, Some(labels), None)?;
            cfg_combine(&uncond, &cond, w)
        }
    }
}

/// Runs the reverse chain from x_T ~ N(0, I) and returns the final sample in
/// model space (pixels or latents, still normalised).
pub fn sample<T: Float, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    table: &ScheduleTable,
    cfg: &SamplerConfig,
    shape: &[usize],
    labels: Option<&[usize]>,
) -> Result<Tensor<T>> {
    cfg.validate(table.num_timesteps())?;
    let n = shape.first().copied().unwrap_or(0);
    if let Some(l) = labels {
        if l.len() != n {
            bail!(Dimension, "{} labels for a batch of {n}", l.len());
        }
    }
    let steps = select_timesteps(table.num_timesteps(), cfg.num_inference_steps)?;
    let mut rng = Rng::derive(cfg.seed, SAMPLE_STREAM);
    let mut x = Tensor::<T>::random_normal(shape, &mut rng);
    no_grad(|| {
        for (i, &t) in steps.iter().enumerate() {
            let prev = steps.get(i + 1).map_or(-1, |&p| p as i64);
            let mut eps = guided_noise(model, &x, &vec![t; n], labels, cfg.guidance_weight)?;
            if cfg.clip_sample {
                eps = clip_noise(table, &eps, t, &x)?;
            }
            x = match cfg.kind {
                SamplerKind::Ddpm => ddpm_step_to(table, &eps, t, prev, &x, &mut rng)?,
                SamplerKind::Ddim => ddim_step(table, &eps, t, prev, &x, cfg.eta, &mut rng)?,
            };
            if !x.is_finite() {
                bail!(Numeric, "sample became non-finite at t={t}");
            }
        }
        Ok(x)
    })
}

/// Full generation: sampling, optional latent decoding, and mapping to [0, 1].
pub fn generate<M: NoisePredictor<f32> + ?Sized>(
    model: &M,
    table: &ScheduleTable,
    cfg: &SamplerConfig,
    shape: &[usize],
    labels: Option<&[usize]>,
    codec: Option<&dyn LatentCodec<f32>>,
    norm: &Normalization,
) -> Result<Tensor<f32>> {
    let x = sample(model, table, cfg, shape, labels)?;
    let pixels = match codec {
        Some(c) => no_grad(|| c.decode(&x))?,
        None => x,
    };
    norm.tensor_to_unit(&pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ZeroPredictor;
    use crate::schedule::ScheduleConfig;

    fn linear(t: usize) -> ScheduleTable {
        ScheduleTable::build(&ScheduleConfig { num_train_timesteps: t, ..Default::default() }).unwrap()
    }

    fn scalar_table(alpha: f64, alpha_bar: f64) -> ScheduleTable {
        // Two steps with ᾱ_1 = alpha_bar and α_1 = alpha.
        let a0 = alpha_bar / alpha;
        ScheduleTable {
            kind: crate::schedule::BetaSchedule::Linear,
            betas: vec![1.0 - a0, 1.0 - alpha],
            alphas: vec![a0, alpha],
            alphas_cumprod: vec![a0, alpha_bar],
        }
    }

    fn s(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![v], &[1]).unwrap()
    }

    #[test]
    fn timestep_selection() {
        assert_eq!(select_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        assert_eq!(select_timesteps(10, 5).unwrap(), [9, 7, 5, 3, 1]);
        let ts = select_timesteps(1000, 250).unwrap();
        assert_eq!((ts.len(), ts[0], ts[0] - ts[1]), (250, 999, 4));
        assert!(matches!(select_timesteps(10, 11), Err(Error::Config(_))));
    }

    #[test]
    fn ddpm_scalar_mean() {
        let tab = scalar_table(0.99, 0.5);
        let c = ddpm_coefficients(&tab, 1, 0).unwrap();
        let expected = (1.0 / 0.99f64.sqrt()) * (1.0 - (0.01 / 0.5f64.sqrt()) * 0.2);
        assert!((c.x_coef * 1.0 + c.eps_coef * 0.2 - expected).abs() < 1e-12);
    }

    #[test]
    fn ddpm_final_step_is_the_mean() {
        let tab = linear(10);
        let x = Tensor::<f64>::random_normal(&[2, 3], &mut Rng::new(1));
        let e = Tensor::<f64>::random_normal(&[2, 3], &mut Rng::new(2));
        let a = ddpm_step(&tab, &e, 0, &x, &mut Rng::new(3)).unwrap();
        let b = ddpm_step(&tab, &e, 0, &x, &mut Rng::new(4)).unwrap();
        assert_eq!(a.data(), b.data());
        let alpha = tab.alphas[0];
        for i in 0..6 {
            let m = (x.data()[i] - (1.0 - alpha) / (1.0 - tab.alphas_cumprod[0]).sqrt() * e.data()[i]) / alpha.sqrt();
            assert!((a.data()[i] - m).abs() < 1e-12);
        }
        let zero = ddpm_step(&tab, &Tensor::<f64>::zeros(&[4]), 0, &Tensor::zeros(&[4]), &mut Rng::new(0)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddpm_inner_step_adds_posterior_noise() {
        let tab = linear(100);
        let x = Tensor::<f64>::zeros(&[20_000]);
        let out = ddpm_step(&tab, &x, 50, &x, &mut Rng::new(5)).unwrap();
        let var = out.data().iter().map(|v| v * v).sum::<f64>() / 20_000.0;
        let want = tab.posterior_variance(50);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }

    #[test]
    fn pred_x0_cases() {
        let tab = scalar_table(0.5, 0.25);
        let v = ddim_pred_x0(&tab, &s(0.5), 1, &s(1.0)).unwrap().item().unwrap();
        assert!((v - (1.0 - 0.75f64.sqrt() * 0.5) / 0.5).abs() < 1e-12);
        let one = scalar_table(1.0, 1.0);
        assert_eq!(ddim_pred_x0(&one, &s(0.3), 1, &s(0.7)).unwrap().item().unwrap(), 0.7);
        let tiny = scalar_table(1e-10, 1e-10);
        assert!(matches!(ddim_pred_x0(&tiny, &s(0.3), 1, &s(0.7)), Err(Error::Numeric(_))));
    }

    #[test]
    fn pred_x0_inverts_add_noise() {
        let tab = linear(1000);
        let mut rng = Rng::new(6);
        let x0 = Tensor::<f32>::random_uniform(&[4, 1, 4, 4], -1.0, 1.0, &mut rng);
        let e = Tensor::<f32>::random_normal(&[4, 1, 4, 4], &mut rng);
        for t in [0usize, 10, 200, 600] {
            let xt = tab.add_noise(&x0, &e, &[t; 4]).unwrap();
            let back = ddim_pred_x0(&tab, &e, t, &xt).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ddim_deterministic_and_exact_final_hop() {
        let tab = linear(100);
        let mut rng = Rng::new(7);
        let x0 = Tensor::<f64>::random_normal(&[1, 8], &mut rng);
        let e = Tensor::<f64>::random_normal(&[1, 8], &mut rng);
        let xt = tab.add_noise(&x0, &e, &[40]).unwrap();
        let a = ddim_step(&tab, &e, 40, 30, &xt, 0.0, &mut Rng::new(1)).unwrap();
        let b = ddim_step(&tab, &e, 40, 30, &xt, 0.0, &mut Rng::new(2)).unwrap();
        assert_eq!(a.data(), b.data());
        let clean = ddim_step(&tab, &e, 40, -1, &xt, 0.0, &mut Rng::new(1)).unwrap();
        for (c, x) in clean.data().iter().zip(x0.data()) {
            assert!((c - x).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_one_matches_ddpm_for_adjacent_steps() {
        let tab = linear(1000);
        for t in 1..1000 {
            let prev = t as i64 - 1;
            let ddim = ddim_coefficients(&tab, t, prev, 1.0).unwrap();
            let ddpm = ddpm_coefficients(&tab, t, prev).unwrap();
            let fixed_small = (1.0 - tab.alphas_cumprod[t - 1]) / (1.0 - tab.alphas_cumprod[t]) * tab.betas[t];
            assert!((ddim.sigma.powi(2) - fixed_small).abs() < 1e-6, "t={t}");
            assert!((ddim.x_coef - ddpm.x_coef).abs() < 1e-6, "t={t}");
            assert!((ddim.eps_coef - ddpm.eps_coef).abs() < 1e-6, "t={t}");
        }
        for t in 0..1000 {
            assert_eq!(ddim_variance(&tab, t, t as i64 - 1, 0.0), 0.0);
        }
    }

    #[test]
    fn step_functions_agree_with_their_coefficients() {
        let tab = linear(50);
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::random_normal(&[6], &mut rng);
        let e = Tensor::<f64>::random_normal(&[6], &mut rng);
        let c = ddim_coefficients(&tab, 30, 20, 0.0).unwrap();
        let y = ddim_step(&tab, &e, 30, 20, &x, 0.0, &mut rng).unwrap();
        for i in 0..6 {
            assert!((y.data()[i] - (c.x_coef * x.data()[i] + c.eps_coef * e.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_above_one_can_break_the_schedule() {
        let tab = linear(1000);
        assert!(matches!(ddim_coefficients(&tab, 999, 0, 5.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn cfg_linear_combination() {
        let u = s(0.2);
        let c = s(0.4);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().data(), u.data());
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().data(), c.data());
        assert!((cfg_combine(&u, &c, 3.0).unwrap().item().unwrap() - 0.8).abs() < 1e-12);
        assert!(cfg_combine(&u, &Tensor::zeros(&[2]), 1.0).is_err());
        let same = Tensor::<f64>::from_vec(vec![-0.0, 1.5], &[2]).unwrap();
        let r = cfg_combine(&same, &same, 7.5).unwrap();
        assert_eq!(r.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn zero_model_chain_has_closed_form() {
        let tab = linear(1000);
        let cfg = SamplerConfig { num_inference_steps: 20, ..Default::default() };
        let out = sample::<f64, _>(&ZeroPredictor, &tab, &cfg, &[2, 1, 2, 2], None).unwrap();
        let x_t = Tensor::<f64>::random_normal(&[2, 1, 2, 2], &mut Rng::derive(cfg.seed, SAMPLE_STREAM));
        let first = select_timesteps(1000, 20).unwrap()[0];
        let factor = 1.0 / tab.alphas_cumprod[first].sqrt();
        for (o, x) in out.data().iter().zip(x_t.data()) {
            assert!((o - factor * x).abs() < 1e-9 * factor.max(1.0) * x.abs().max(1.0));
        }
    }

    #[test]
    fn single_step_ddim_returns_pred_x0() {
        let tab = linear(100);
        let cfg = SamplerConfig { num_inference_steps: 1, ..Default::default() };
        let out = sample::<f64, _>(&ZeroPredictor, &tab, &cfg, &[1, 1, 2, 2], None).unwrap();
        let x_t = Tensor::<f64>::random_normal(&[1, 1, 2, 2], &mut Rng::derive(cfg.seed, SAMPLE_STREAM));
        let x0 = ddim_pred_x0(&tab, &Tensor::zeros(&[1, 1, 2, 2]), 99, &x_t).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn deterministic_generation() {
        let tab = linear(100);
        let cfg = SamplerConfig { num_inference_steps: 10, seed: 5, ..Default::default() };
        let run = || generate(&ZeroPredictor, &tab, &cfg, &[2, 3, 4, 4], None, None, &Normalization::default()).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let ddpm = SamplerConfig { kind: SamplerKind::Ddpm, ..cfg.clone() };
        let c = generate(&ZeroPredictor, &tab, &ddpm, &[2, 3, 4, 4], None, None, &Normalization::default()).unwrap();
        let d = generate(&ZeroPredictor, &tab, &ddpm, &[2, 3, 4, 4], None, None, &Normalization::default()).unwrap();
        assert_eq!(c.data(), d.data());
    }

    #[test]
    fn config_bounds() {
        assert!(SamplerConfig { num_inference_steps: 0, ..Default::default() }.validate(1000).is_err());
        assert!(SamplerConfig { num_inference_steps: 1001, ..Default::default() }.validate(1000).is_err());
        assert!(SamplerConfig { eta: -0.5, ..Default::default() }.validate(1000).is_err());
        assert!("ddim".parse::<SamplerKind>().is_ok());
        assert!(matches!("plms".parse::<SamplerKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_only_touches_out_of_range_estimates() {
        let tab = linear(1000);
        let t = 600;
        let x = Tensor::<f64>::from_vec(vec![0.1, -2.0, 5.0], &[1, 3]).unwrap();
        let eps = Tensor::<f64>::from_vec(vec![0.1, 0.0, 0.0], &[1, 3]).unwrap();
        let clipped = clip_noise(&tab, &eps, t, &x).unwrap();
        let x0 = ddim_pred_x0(&tab, &clipped, t, &x).unwrap();
        assert_eq!(clipped.data()[0], 0.1);
        assert!((x0.data()[1] + 1.0).abs() < 1e-12 && (x0.data()[2] - 1.0).abs() < 1e-12);
    }
}
