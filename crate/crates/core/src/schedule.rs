//! Noise schedules and the closed-form forward process.
//!
//! A [`ScheduleTable`] stores β, α = 1−β and the cumulative products ᾱ for
//! timesteps `0..T`, all in double precision. Index −1 is a virtual clean step
//! with ᾱ = 1, used as the "previous" timestep of index 0.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::tensor::{Float, Tensor};

/// Upper bound on any β, so α stays strictly positive.
pub const MAX_BETA: f64 = 0.999;

/// Smallest ᾱ the cosine law may produce (reached at the final timestep).
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BetaSchedule {
    #[default]
    Linear,
    Cosine,
}

impl BetaSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            BetaSchedule::Linear => "linear",
            BetaSchedule::Cosine => "cosine",
        }
    }
}

impl fmt::Display for BetaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaSchedule::Linear),
            "cosine" => Ok(BetaSchedule::Cosine),
            other => bail!(Config, "beta_schedule: unknown value {other:?}, expected one of linear, cosine"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_train_timesteps: usize,
    pub beta_schedule: BetaSchedule,
    /// Added to the denominator of the cosine ratio ᾱ_t / ᾱ_{t−1}.
    pub stability_epsilon: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 0.0002,
            beta_end: 0.02,
            num_train_timesteps: 1000,
            beta_schedule: BetaSchedule::Linear,
            stability_epsilon: 1e-12,
        }
    }
}

impl ScheduleConfig {
    pub fn linear(beta_start: f64, beta_end: f64, num_train_timesteps: usize) -> Self {
        Self {
            beta_start,
            beta_end,
            num_train_timesteps,
            ..Self::default()
        }
    }

    pub fn cosine(num_train_timesteps: usize) -> Self {
        Self {
            num_train_timesteps,
            beta_schedule: BetaSchedule::Cosine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_train_timesteps < 2 {
            bail!(Config, "num_train_timesteps must be at least 2, got {}", self.num_train_timesteps);
        }
        match self.beta_schedule {
            BetaSchedule::Linear => {
                if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
                    bail!(
                        Config,
                        "need 0 < beta_start <= beta_end < 1, got beta_start {} beta_end {}",
                        self.beta_start,
                        self.beta_end
                    );
                }
            }
            BetaSchedule::Cosine => {
                if !(self.stability_epsilon >= 0.0 && self.stability_epsilon < 1e-3) {
                    bail!(Config, "stability_epsilon must be small and non-negative, got {}", self.stability_epsilon);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    pub kind: BetaSchedule,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

/// The cosine law ᾱ(t) = cos²(π/2 · t/T) for t ∈ [0, T], floored.
pub fn cosine_alpha_bar(t: usize, num_timesteps: usize) -> f64 {
    let c = (std::f64::consts::FRAC_PI_2 * t as f64 / num_timesteps as f64).cos();
    (c * c).max(ALPHA_BAR_FLOOR)
}

impl ScheduleTable {
    pub fn build(cfg: &ScheduleConfig) -> Result<Self> {
        match cfg.beta_schedule {
            BetaSchedule::Linear => Self::build_linear(cfg),
            BetaSchedule::Cosine => Self::build_cosine(cfg),
        }
    }

    /// β_i = β_start + i/(T−1) · (β_end − β_start)
    pub fn build_linear(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.beta_schedule != BetaSchedule::Linear {
            bail!(Config, "build_linear called with a {} config", cfg.beta_schedule);
        }
        cfg.validate()?;
        let t = cfg.num_train_timesteps;
        let span = cfg.beta_end - cfg.beta_start;
        let betas = (0..t)
            .map(|i| cfg.beta_start + (i as f64 / (t - 1) as f64) * span)
            .collect();
        Ok(Self::from_betas(BetaSchedule::Linear, betas))
    }

    /// Table index i holds the cosine law at t = i + 1, so the virtual index −1
    /// (ᾱ = 1) is the law at t = 0 and the last index is the law at t = T.
    pub fn build_cosine(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.beta_schedule != BetaSchedule::Cosine {
            bail!(Config, "build_cosine called with a {} config", cfg.beta_schedule);
        }
        cfg.validate()?;
        let t = cfg.num_train_timesteps;
        let betas = (0..t)
            .map(|i| {
                let ratio = cosine_alpha_bar(i + 1, t) / (cosine_alpha_bar(i, t) + cfg.stability_epsilon);
                (1.0 - ratio).min(MAX_BETA)
            })
            .collect();
        Ok(Self::from_betas(BetaSchedule::Cosine, betas))
    }

    fn from_betas(kind: BetaSchedule, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alphas_cumprod = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self {
            kind,
            betas,
            alphas,
            alphas_cumprod,
        }
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ at `t`, with ᾱ(−1) = 1.
    pub fn alpha_bar(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alphas_cumprod[t as usize]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps() {
            bail!(Index, "timestep {t} out of range [0, {})", self.num_timesteps());
        }
        Ok(())
    }

    /// Closed-form sample of q(x_t | x_0): √ᾱ_t·x0 + √(1−ᾱ_t)·noise, with one
    /// timestep per leading-axis element.
    pub fn add_noise<T: Float>(&self, x0: &Tensor<T>, noise: &Tensor<T>, timesteps: &[usize]) -> Result<Tensor<T>> {
        if x0.shape() != noise.shape() {
            bail!(Dimension, "add_noise: x0 {:?} vs noise {:?}", x0.shape(), noise.shape());
        }
        if x0.rank() == 0 || x0.dim(0) != timesteps.len() {
            bail!(Dimension, "add_noise: {} timesteps for batch shape {:?}", timesteps.len(), x0.shape());
        }
        let per = x0.numel() / timesteps.len();
        let mut out = Vec::with_capacity(x0.numel());
        for (b, &t) in timesteps.iter().enumerate() {
            self.check_timestep(t)?;
            let ab = self.alphas_cumprod[t];
            let (sa, sn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            let xs = &x0.data()[b * per..(b + 1) * per];
            let ns = &noise.data()[b * per..(b + 1) * per];
            out.extend(xs.iter().zip(ns).map(|(&x, &n)| sa * x + sn * n));
        }
        Tensor::from_vec(out, x0.shape())
    }

    /// Fixed-small reverse variance σ_t² = (1−ᾱ_{t−1})/(1−ᾱ_t) · β_t; zero at t = 0.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let ab = self.alphas_cumprod[t];
        let ab_prev = self.alphas_cumprod[t - 1];
        (1.0 - ab_prev) / (1.0 - ab) * self.betas[t]
    }

    /// `t,beta,alpha,alpha_cumprod` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_cumprod\n");
        for t in 0..self.num_timesteps() {
            let _ = writeln!(s, "{},{},{},{}", t, self.betas[t], self.alphas[t], self.alphas_cumprod[t]);
        }
        s
    }
}
