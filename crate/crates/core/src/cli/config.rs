//! Flat `key = value` run configuration with Table-style key names.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::LoaderConfig;
use crate::diffusion::TrainConfig;
use crate::error::{bail, Error, Result};
use crate::latent::VaeConfig;
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::{BetaSchedule, ScheduleConfig};
use crate::unet::UNetConfig;

/// Environment variable consulted for the seed when neither file nor flags set it.
pub const SEED_ENV: &str = "DIFFKIT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormalizationMode {
    #[default]
    UnitIntervalSymmetric,
    DatasetStandardize,
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_interval_symmetric" => Ok(Self::UnitIntervalSymmetric),
            "dataset_standardize" => Ok(Self::DatasetStandardize),
            other => Err(Error::Config(format!(
                "unknown normalization '{other}' (valid: unit_interval_symmetric, dataset_standardize)"
            ))),
        }
    }
}

impl NormalizationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UnitIntervalSymmetric => "unit_interval_symmetric",
            Self::DatasetStandardize => "dataset_standardize",
        }
    }
}

/// Conversion between config text and typed values.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::Config(format!("expected {}, got '{s}'", stringify!($t))))
            }
            fn render(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}

numeric_value!(u64, usize, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(Error::Config(format!("expected true or false, got '{s}'"))),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        if inner.trim().is_empty() {
            return Ok(Vec::new());
        }
        inner
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("expected a list of integers, got '{s}'"))))
            .collect()
    }
    fn render(&self) -> String {
        let parts: Vec<String> = self.iter().map(|v| v.to_string()).collect();
        format!("[{}]", parts.join(", "))
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse()
            }
            fn render(&self) -> String {
                self.as_str().to_string()
            }
        }
    )*};
}

enum_value!(BetaSchedule, SamplerKind, NormalizationMode);

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr,)*) => {
        /// Every setting of a run. Keys mirror the field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl RunConfig {
            /// All keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Assigns one key from its text form, without cross-validation.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = unquote(value);
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {}", e.message())))?;
                    })*
                    _ => bail!(Config, "unknown config key '{key}'"),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(self.$name.render()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    seed: u64 = 42,
    image_size: usize = 32,
    batch_size: usize = 128,
    num_workers: usize = 4,
    num_classes: usize = 10,
    num_epochs: usize = 480,
    learning_rate: f64 = 1e-4,
    weight_decay: f64 = 1e-4,
    num_train_timesteps: usize = 1000,
    num_inference_steps: usize = 250,
    beta_start: f64 = 0.0002,
    beta_end: f64 = 0.02,
    beta_schedule: BetaSchedule = BetaSchedule::Linear,
    variance_type: String = "fixed_small".into(),
    predictor_type: String = "epsilon".into(),
    unet_in_size: usize = 32,
    unet_in_ch: usize = 3,
    unet_ch: usize = 64,
    unet_num_res_blocks: usize = 3,
    unet_ch_mult: Vec<usize> = vec![1, 2, 4, 4],
    unet_attn: Vec<usize> = vec![2, 3],
    unet_dropout: f64 = 0.1,
    sampler: SamplerKind = SamplerKind::Ddim,
    eta: f64 = 0.0,
    guidance_weight: f64 = 1.0,
    clip_sample: bool = false,
    label_dropout_prob: f64 = 0.1,
    /// Conditions the UNet on labels; `num_classes` then counts the null class too.
    class_conditional: bool = false,
    latent: bool = false,
    latent_channels: usize = 4,
    latent_factor: usize = 4,
    vae_ch: usize = 32,
    beta_kl: f64 = 1e-3,
    vae_epochs: usize = 20,
    vae_learning_rate: f64 = 1e-3,
    stability_epsilon: f64 = 1e-12,
    normalization: NormalizationMode = NormalizationMode::UnitIntervalSymmetric,
    flip_prob: f64 = 0.5,
    log_every: u64 = 1,
    /// Stop training after this many optimizer steps; 0 means no limit.
    max_steps: u64 = 0,
    eval_splits: usize = 10,
    num_samples: usize = 16,
    /// Labels for conditional sampling, cycled over the samples; empty means 0, 1, 2, ...
    sample_labels: Vec<usize> = Vec::new(),
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['\'', '"'] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

impl Error {
    fn message(&self) -> String {
        match self {
            Error::Config(m) => m.clone(),
            other => other.to_string(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Also accepts a run
/// manifest (JSON with a `config` object), so earlier runs can be replayed.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>> {
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let Some(obj) = v.get("config").and_then(|c| c.as_object()) else {
            bail!(Config, "manifest has no 'config' object");
        };
        return obj
            .iter()
            .map(|(k, v)| match v.as_str() {
                Some(s) => Ok((k.clone(), s.to_string())),
                None => Ok((k.clone(), v.to_string())),
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Config, "line {}: expected 'key = value', got '{}'", n + 1, raw.trim());
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// defaults < `DIFFKIT_SEED` < each layer in order, then validated.
    pub fn resolve(env_seed: Option<&str>, layers: &[Vec<(String, String)>]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(s) = env_seed {
            cfg.set("seed", s).map_err(|e| Error::Config(format!("{SEED_ENV}: {}", e.message())))?;
        }
        for layer in layers {
            for (k, v) in layer {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses file text plus flag overrides (flags win).
    pub fn parse(text: &str, flags: &[(String, String)]) -> Result<Self> {
        Self::resolve(None, &[parse_assignments(text)?, flags.to_vec()])
    }

    /// Canonical text: every key in fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn to_json_map(&self) -> serde_json::Map<String, serde_json::Value> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), serde_json::Value::String(self.get(k).unwrap_or_default())))
            .collect()
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variance_type != "fixed_small" {
            bail!(Config, "variance_type: only 'fixed_small' is supported, got '{}'", self.variance_type);
        }
        if self.predictor_type != "epsilon" {
            bail!(Config, "predictor_type: only 'epsilon' is supported, got '{}'", self.predictor_type);
        }
        if self.num_inference_steps == 0 || self.num_inference_steps > self.num_train_timesteps {
            bail!(
                Config,
                "num_inference_steps ({}) must be between 1 and num_train_timesteps ({})",
                self.num_inference_steps,
                self.num_train_timesteps
            );
        }
        if self.latent {
            if self.latent_factor == 0 || !self.image_size.is_multiple_of(self.latent_factor) {
                bail!(Config, "latent_factor ({}) must divide image_size ({})", self.latent_factor, self.image_size);
            }
            if self.unet_in_size != self.image_size / self.latent_factor {
                bail!(
                    Config,
                    "unet_in_size ({}) must equal image_size / latent_factor ({}) when latent = true",
                    self.unet_in_size,
                    self.image_size / self.latent_factor
                );
            }
            if self.unet_in_ch != self.latent_channels {
                bail!(
                    Config,
                    "unet_in_ch ({}) must equal latent_channels ({}) when latent = true",
                    self.unet_in_ch,
                    self.latent_channels
                );
            }
        } else if self.unet_in_size != self.image_size {
            bail!(Config, "unet_in_size ({}) must equal image_size ({})", self.unet_in_size, self.image_size);
        }
        if self.class_conditional && self.num_classes < 2 {
            bail!(Config, "num_classes must be at least 2 (real classes plus the null class) when class_conditional = true");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            bail!(Config, "flip_prob must be in [0, 1], got {}", self.flip_prob);
        }
        if self.num_samples == 0 {
            bail!(Config, "num_samples must be at least 1");
        }
        if let Some(&l) = self.sample_labels.iter().find(|&&l| l >= self.num_classes.max(1)) {
            bail!(Config, "sample_labels: label {l} out of range for num_classes = {}", self.num_classes);
        }
        if self.eval_splits == 0 {
            bail!(Config, "eval_splits must be at least 1");
        }
        self.schedule_config().validate()?;
        self.unet_config().validate()?;
        self.train_config().validate()?;
        self.sampler_config().validate(self.num_train_timesteps)?;
        self.vae_config().validate()?;
        if !(self.beta_kl >= 0.0) || !(self.vae_learning_rate > 0.0) {
            bail!(Config, "beta_kl must be >= 0 and vae_learning_rate > 0");
        }
        Ok(())
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            num_train_timesteps: self.num_train_timesteps,
            beta_schedule: self.beta_schedule,
            stability_epsilon: self.stability_epsilon,
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_size: self.unet_in_size,
            in_ch: self.unet_in_ch,
            base_ch: self.unet_ch,
            ch_mult: self.unet_ch_mult.clone(),
            num_res_blocks: self.unet_num_res_blocks,
            attn_levels: self.unet_attn.clone(),
            dropout: self.unet_dropout,
            num_classes: if self.class_conditional { self.num_classes } else { 0 },
            time_embed_dim: 4 * self.unet_ch,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            num_epochs: self.num_epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            label_dropout_prob: self.label_dropout_prob,
            log_every: self.log_every,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            num_inference_steps: self.num_inference_steps,
            eta: self.eta,
            guidance_weight: self.guidance_weight,
            seed: self.seed,
            clip_sample: self.clip_sample,
        }
    }

    /// VAE for images of `image_channels` channels.
    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            in_ch: 3,
            ch: self.vae_ch,
            latent_channels: self.latent_channels,
            factor: self.latent_factor,
        }
    }

    pub fn loader_config(&self, normalization: crate::data::Normalization) -> LoaderConfig {
        LoaderConfig {
            batch_size: self.batch_size,
            shuffle: true,
            seed: self.seed,
            num_workers: self.num_workers,
            flip_prob: self.flip_prob,
            normalization,
        }
    }

    /// Channels of the pixel-space images this run consumes.
    pub fn image_channels(&self) -> usize {
        if self.latent {
            3
        } else {
            self.unet_in_ch
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.beta_start, 0.0002);
        assert_eq!(c.beta_end, 0.02);
        assert_eq!((c.seed, c.batch_size, c.num_workers, c.num_epochs), (42, 128, 4, 480));
        assert_eq!(c.unet_ch_mult, [1, 2, 4, 4]);
        assert_eq!(c.unet_attn, [2, 3]);
        assert_eq!(c.predictor_type, "epsilon");
        assert_eq!(c.variance_type, "fixed_small");
    }

    #[test]
    fn flags_override_file() {
        let text = "num_inference_steps = 100\n# comment\nbeta_schedule = 'cosine'  # trailing\n";
        let c = RunConfig::parse(text, &[("num_inference_steps".into(), "250".into())]).unwrap();
        assert_eq!(c.num_inference_steps, 250);
        assert_eq!(c.beta_schedule, BetaSchedule::Cosine);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("beta_schedule = cubic", &[]).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("beta_schedule") && m.contains("linear")), "{e}");
        let e = RunConfig::parse("bogus = 1", &[]).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("bogus")));
        let e = RunConfig::parse("batch_size = many", &[]).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("batch_size")));
        let e = RunConfig::parse("num_inference_steps = 2000", &[]).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("num_inference_steps")));
        assert!(RunConfig::parse("no equals sign", &[]).is_err());
    }

    #[test]
    fn cross_field_checks() {
        assert!(RunConfig::parse("image_size = 64", &[]).is_err());
        let latent = "latent = true\nimage_size = 128\nunet_in_size = 32\nunet_in_ch = 4\nlatent_channels = 4";
        assert!(RunConfig::parse(latent, &[]).is_ok());
        assert!(RunConfig::parse(&latent.replace("unet_in_ch = 4", "unet_in_ch = 3"), &[]).is_err());
    }

    #[test]
    fn text_round_trip_and_hash() {
        let c = RunConfig { learning_rate: 3.3e-5, unet_attn: vec![], ..Default::default() };
        let back = RunConfig::parse(&c.to_text(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn manifest_json_is_accepted() {
        let c = RunConfig { seed: 7, ..Default::default() };
        let json = serde_json::json!({ "config": c.to_json_map() }).to_string();
        assert_eq!(RunConfig::parse(&json, &[]).unwrap(), c);
    }

    #[test]
    fn env_seed_is_lowest_precedence() {
        let c = RunConfig::resolve(Some("5"), &[]).unwrap();
        assert_eq!(c.seed, 5);
        let c = RunConfig::resolve(Some("5"), &[vec![("seed".into(), "9".into())]]).unwrap();
        assert_eq!(c.seed, 9);
        assert!(RunConfig::resolve(Some("x"), &[]).is_err());
    }
}
