use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use super::checkpoint::{Checkpoint, StoredTensor};
use super::config::{NormalizationMode, RunConfig};
use super::output::{grid_cols, save_grid, save_images, write_json};
use crate::data::{load_cifar10, load_image_folder, Batch, ChannelStats, Dataset, Loader, Normalization};
use crate::diffusion::{train, TRAIN_STREAM};
use crate::error::{bail, Error, Result};
use crate::latent::{encode_dataset, fit_latent_scale, vae_train_step, LatentCodec, LatentLoader, Vae};
use crate::metrics::{fid, fit_gaussian, inception_score, FeatureExtractor, RandomConvExtractor, TinyClassifier};
use crate::nn::Module;
use crate::optim::AdamW;
use crate::sampler::generate;
use crate::schedule::ScheduleTable;
use crate::tensor::{Rng, Tensor};
use crate::unet::UNet;

pub const MODEL_FILE: &str = "model.dfck";
pub const VAE_FILE: &str = "vae.dfck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Images per forward pass when encoding or extracting features.
const CHUNK: usize = 64;

pub fn require_path(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(Usage, "{what} {} does not exist", path.display());
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn is_cifar_dir(path: &Path) -> bool {
    std::fs::read_dir(path).is_ok_and(|mut it| {
        it.any(|e| {
            e.ok().and_then(|e| e.file_name().to_str().map(|n| n.starts_with("data_batch_") && n.ends_with(".bin")))
                == Some(true)
        })
    })
}

/// A CIFAR-10 binary file or directory, else an image folder resized to `image_size`.
pub fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    require_path(path, "data path")?;
    let ds = if path.is_file() || is_cifar_dir(path) {
        load_cifar10(path)?
    } else {
        load_image_folder(path, cfg.image_channels(), Some(cfg.image_size))?
    };
    if (ds.height, ds.width) != (cfg.image_size, cfg.image_size) {
        bail!(Config, "image_size is {} but the data is {}x{}", cfg.image_size, ds.width, ds.height);
    }
    if ds.channels != cfg.image_channels() {
        bail!(Config, "the model expects {} image channels, the data has {}", cfg.image_channels(), ds.channels);
    }
    if cfg.class_conditional && ds.class_count + 1 > cfg.num_classes {
        bail!(
            Config,
            "num_classes = {} leaves no room for the null class with {} data classes",
            cfg.num_classes,
            ds.class_count
        );
    }
    ds.validate()?;
    Ok(ds)
}

fn normalization_for(cfg: &RunConfig, ds: &Dataset) -> Result<Normalization> {
    Ok(match cfg.normalization {
        NormalizationMode::UnitIntervalSymmetric => Normalization::UnitIntervalSymmetric,
        NormalizationMode::DatasetStandardize => {
            let s = ChannelStats::compute(ds.images.iter().map(|v| v.as_slice()), ds.channels)?;
            // Rounded to f32 so training and checkpoint-restored sampling agree exactly.
            let round = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
            Normalization::Standardize(ChannelStats { mean: round(s.mean), std: round(s.std) })
        }
    })
}

fn store_normalization(ck: &mut Checkpoint, norm: &Normalization) {
    if let Normalization::Standardize(s) = norm {
        for (name, v) in [("norm.mean", &s.mean), ("norm.std", &s.std)] {
            let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            ck.tensors.insert(name.into(), StoredTensor { shape: vec![data.len()], data });
        }
    }
}

fn restore_normalization(ck: &Checkpoint, cfg: &RunConfig) -> Result<Normalization> {
    match cfg.normalization {
        NormalizationMode::UnitIntervalSymmetric => Ok(Normalization::UnitIntervalSymmetric),
        NormalizationMode::DatasetStandardize => {
            let get = |k: &str| {
                ck.tensors
                    .get(k)
                    .map(|t| t.data.iter().map(|&v| v as f64).collect::<Vec<f64>>())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {k} for dataset_standardize")))
            };
            Ok(Normalization::Standardize(ChannelStats { mean: get("norm.mean")?, std: get("norm.std")? }))
        }
    }
}

fn restore_vae(ck: &Checkpoint, cfg: &RunConfig) -> Result<Vae<f32>> {
    let mut vae = Vae::new(cfg.vae_config(), &mut Rng::new(0))?;
    ck.load_module("vae", &mut vae)?;
    vae.latent_scale = ck
        .latent_scale
        .ok_or_else(|| Error::Format("checkpoint holds a VAE but no latent scale".into()))?;
    Ok(vae)
}

fn store_vae(ck: &mut Checkpoint, vae: &Vae<f32>) {
    ck.insert_module("vae", vae);
    ck.latent_scale = Some(vae.latent_scale);
}

/// Fixed-order, unaugmented batches covering the whole dataset.
fn plain_batches(ds: &Dataset, norm: &Normalization) -> Result<Vec<Batch<f32>>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    idx.chunks(CHUNK)
        .map(|c| Ok(Batch::new(ds.tensor(c, norm)?, Some(c.iter().map(|&i| ds.labels[i]).collect()))))
        .collect()
}

fn open_log(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(std::fs::File::create(path)?))
}

fn manifest(cfg: &RunConfig, command: &str, extra: serde_json::Value) -> serde_json::Value {
    let mut m = json!({
        "command": command,
        "seed": cfg.seed,
        "config_hash": format!("{:016x}", cfg.hash()),
        "config": cfg.to_json_map(),
    });
    if let (Some(m), serde_json::Value::Object(e)) = (m.as_object_mut(), extra) {
        m.extend(e);
    }
    m
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub data: PathBuf,
    pub out: PathBuf,
    /// VAE checkpoint; required when `latent = true`.
    pub vae: Option<PathBuf>,
}

pub fn train_command(args: &TrainArgs, progress: &mut dyn Write) -> Result<PathBuf> {
    let cfg = &args.config;
    if cfg.latent && args.vae.is_none() {
        bail!(Usage, "latent = true needs --vae <checkpoint> from train-vae");
    }
    if let Some(v) = &args.vae {
        require_path(v, "VAE checkpoint")?;
    }
    let ds = load_dataset(&args.data, cfg)?;
    create_dir(&args.out)?;
    let norm = normalization_for(cfg, &ds)?;
    let _ = writeln!(progress, "loaded {} images ({} classes) from {}", ds.len(), ds.class_count, args.data.display());

    let table = ScheduleTable::build(&cfg.schedule_config())?;
    let mut model = UNet::<f32>::new(cfg.unet_config(), &mut Rng::new(cfg.seed))?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut log = open_log(&args.out.join(LOG_FILE))?;
    let mut ck = Checkpoint { config_text: cfg.to_text(), ..Default::default() };
    let _ = writeln!(progress, "unet has {} parameters", model.param_count());

    let report = if cfg.latent {
        let vae_ck = Checkpoint::load(args.vae.as_deref().unwrap_or(Path::new("")))?;
        let vae = restore_vae(&vae_ck, cfg)?;
        let mut latents = encode_dataset(&vae, &plain_batches(&ds, &norm)?)?;
        if !cfg.class_conditional {
            latents.labels = None;
        }
        latents.save(&args.out.join("latents.dflt"))?;
        let _ = writeln!(progress, "encoded {} latents of {}x{}x{}", latents.len(), latents.channels, latents.height, latents.width);
        let mut source = LatentLoader { dataset: &latents, batch_size: cfg.batch_size, shuffle: true, seed: cfg.seed };
        let r = train(&mut model, &mut opt, &table, &mut source, &cfg.train_config(), &mut log)?;
        store_vae(&mut ck, &vae);
        r
    } else {
        let mut loader = Loader::new(Arc::new(ds), cfg.loader_config(norm.clone()))?;
        train(&mut model, &mut opt, &table, &mut loader, &cfg.train_config(), &mut log)?
    };
    log.flush()?;

    ck.global_step = report.steps;
    ck.insert_module("unet", &model);
    ck.insert_optimizer(&opt);
    store_normalization(&mut ck, &norm);
    let path = args.out.join(MODEL_FILE);
    ck.save(&path)?;
    let last = report.step_losses().last().copied();
    write_json(
        &args.out.join(MANIFEST_FILE),
        &manifest(cfg, "train", json!({ "steps": report.steps, "final_loss": last, "checkpoint": MODEL_FILE })),
    )?;
    let _ = writeln!(progress, "trained {} steps, wrote {}", report.steps, path.display());
    Ok(path)
}

pub struct TrainVaeArgs {
    pub config: RunConfig,
    pub data: PathBuf,
    pub out: PathBuf,
}

pub fn train_vae_command(args: &TrainVaeArgs, progress: &mut dyn Write) -> Result<PathBuf> {
    let cfg = &args.config;
    let mut vcfg = cfg.clone();
    // The VAE always sees pixel images, whatever the diffusion model's input is.
    vcfg.latent = true;
    let ds = load_dataset(&args.data, &vcfg)?;
    create_dir(&args.out)?;
    let norm = normalization_for(cfg, &ds)?;
    let mut vae = Vae::<f32>::new(cfg.vae_config(), &mut Rng::new(cfg.seed))?;
    let mut opt = AdamW::new(cfg.vae_learning_rate, 0.0);
    let mut rng = Rng::derive(cfg.seed, TRAIN_STREAM);
    let loader = Loader::new(Arc::new(ds.clone()), cfg.loader_config(norm.clone()))?;
    let mut log = open_log(&args.out.join(LOG_FILE))?;
    let mut step = 0u64;
    'epochs: for epoch in 0..cfg.vae_epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in loader.epoch(epoch) {
            let (recon, kl) = vae_train_step(&mut vae, &batch?.images, cfg.beta_kl, &mut opt, &mut rng)?;
            step += 1;
            total += recon;
            count += 1;
            if step.is_multiple_of(cfg.log_every) {
                writeln!(log, "{}", json!({ "kind": "step", "step": step, "epoch": epoch, "recon": recon, "kl": kl }))?;
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                writeln!(log, "{}", json!({ "kind": "epoch", "step": step, "epoch": epoch, "recon": total / count as f64 }))?;
                break 'epochs;
            }
        }
        writeln!(log, "{}", json!({ "kind": "epoch", "step": step, "epoch": epoch, "recon": total / count.max(1) as f64 }))?;
    }
    log.flush()?;
    let batches = plain_batches(&ds, &norm)?;
    let scale = fit_latent_scale(&mut vae, batches.iter().map(|b| &b.images))?;
    let mut ck = Checkpoint { config_text: cfg.to_text(), global_step: step, ..Default::default() };
    store_vae(&mut ck, &vae);
    store_normalization(&mut ck, &norm);
    let path = args.out.join(VAE_FILE);
    ck.save(&path)?;
    write_json(
        &args.out.join(MANIFEST_FILE),
        &manifest(cfg, "train-vae", json!({ "steps": step, "latent_scale": scale, "checkpoint": VAE_FILE })),
    )?;
    let _ = writeln!(progress, "trained vae for {step} steps (latent scale {scale:.4}), wrote {}", path.display());
    Ok(path)
}

/// Config stored in a checkpoint, minus its seed so sampling seeds come from
/// the environment, file or flags.
pub fn checkpoint_layer(ck: &Checkpoint) -> Result<Vec<(String, String)>> {
    Ok(super::config::parse_assignments(&ck.config_text)?
        .into_iter()
        .filter(|(k, _)| k != "seed")
        .collect())
}

pub struct SampleArgs {
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

/// Labels for conditional sampling; `None` for unconditional models.
pub fn sample_labels(cfg: &RunConfig) -> Result<Option<Vec<usize>>> {
    if !cfg.class_conditional {
        if !cfg.sample_labels.is_empty() {
            bail!(Config, "sample_labels given but the model is not class-conditional");
        }
        return Ok(None);
    }
    let real = cfg.num_classes - 1;
    let labels = (0..cfg.num_samples)
        .map(|i| match cfg.sample_labels.as_slice() {
            [] => i % real,
            l => l[i % l.len()],
        })
        .collect();
    Ok(Some(labels))
}

pub fn sample_command(args: &SampleArgs, progress: &mut dyn Write) -> Result<Tensor<f32>> {
    let cfg = &args.config;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut model = UNet::<f32>::new(cfg.unet_config(), &mut Rng::new(0))?;
    ck.load_module("unet", &mut model)?;
    let vae = if cfg.latent { Some(restore_vae(&ck, cfg)?) } else { None };
    let norm = restore_normalization(&ck, cfg)?;
    let table = ScheduleTable::build(&cfg.schedule_config())?;
    let labels = sample_labels(cfg)?;
    let shape = [cfg.num_samples, cfg.unet_in_ch, cfg.unet_in_size, cfg.unet_in_size];
    let _ = writeln!(
        progress,
        "sampling {} images with {} x {} steps (eta {}, guidance {})",
        cfg.num_samples, cfg.sampler, cfg.num_inference_steps, cfg.eta, cfg.guidance_weight
    );
    let codec = vae.as_ref().map(|v| v as &dyn LatentCodec<f32>);
    let images = generate(&model, &table, &cfg.sampler_config(), &shape, labels.as_deref(), codec, &norm)?;
    create_dir(&args.out)?;
    let names = save_images(&images, &args.out, "sample_")?;
    save_grid(&images, grid_cols(cfg.num_samples), &args.out.join("grid.png"))?;
    write_json(
        &args.out.join(MANIFEST_FILE),
        &manifest(
            cfg,
            "sample",
            json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "checkpoint_step": ck.global_step,
                "labels": labels,
                "grid": "grid.png",
                "images": names,
            }),
        ),
    )?;
    let _ = writeln!(progress, "wrote {} images and grid.png to {}", cfg.num_samples, args.out.display());
    Ok(images)
}

pub struct EvaluateArgs {
    pub config: RunConfig,
    pub real: PathBuf,
    pub generated: PathBuf,
    pub out: PathBuf,
    pub classifier_epochs: usize,
}

fn features_and_probs(ext: &dyn FeatureExtractor, ds: &Dataset, norm: &Normalization) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (mut feats, mut probs, mut classes) = (Vec::new(), Vec::new(), 0);
    for b in plain_batches(ds, norm)? {
        feats.extend(ext.features(&b.images)?.data().iter().map(|&v| v as f64));
        let p = ext.class_probs(&b.images)?;
        classes = p.dim(1);
        probs.extend(p.data().iter().map(|&v| v as f64));
    }
    Ok((feats, probs, classes))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor: String,
}

pub fn evaluate_command(args: &EvaluateArgs, progress: &mut dyn Write) -> Result<EvalReport> {
    require_path(&args.real, "real image directory")?;
    require_path(&args.generated, "generated image directory")?;
    let cfg = &args.config;
    let channels = 3;
    let real = load_image_folder(&args.real, channels, None)?;
    let gen = load_image_folder(&args.generated, channels, Some(real.height.max(real.width)))?;
    if (gen.height, gen.width) != (real.height, real.width) {
        bail!(Input, "real images are {}x{}, generated are {}x{}", real.width, real.height, gen.width, gen.height);
    }
    let norm = Normalization::UnitIntervalSymmetric;
    let (ext, name): (Box<dyn FeatureExtractor>, &str) = if real.class_count >= 2 {
        let mut clf = TinyClassifier::new(channels, real.class_count, cfg.seed)?;
        let all: Vec<usize> = (0..real.len()).collect();
        let acc = clf.fit(&real.tensor(&all, &norm)?, &real.labels, args.classifier_epochs, 3e-3, cfg.seed)?;
        let _ = writeln!(progress, "feature classifier reached {:.1}% training accuracy", acc * 100.0);
        (Box::new(clf), "trained_classifier")
    } else {
        (Box::new(RandomConvExtractor::new(channels, cfg.seed)), "random_conv")
    };
    let d = ext.feature_dim();
    let (fr, _, _) = features_and_probs(ext.as_ref(), &real, &norm)?;
    let (fg, pg, classes) = features_and_probs(ext.as_ref(), &gen, &norm)?;
    let score = fid(&fit_gaussian(&fr, real.len(), d)?, &fit_gaussian(&fg, gen.len(), d)?)?;
    let splits = cfg.eval_splits.min(gen.len());
    let (is_mean, is_std) = inception_score(&pg, gen.len(), classes, splits)?;
    let report = EvalReport {
        fid: score,
        is_mean,
        is_std,
        n_real: real.len(),
        n_gen: gen.len(),
        extractor: name.into(),
    };
    let value = serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&args.out, &value)?;
    let _ = writeln!(progress, "fid {score:.4}, is {is_mean:.4} ± {is_std:.4}");
    Ok(report)
}

pub fn schedule_dump_command(cfg: &RunConfig, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let csv = ScheduleTable::build(&cfg.schedule_config())?.to_csv();
    match out {
        Some(p) => std::fs::write(p, csv)?,
        None => stdout.write_all(csv.as_bytes())?,
    }
    Ok(())
}
