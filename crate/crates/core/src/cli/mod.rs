//! Command-line front end: config resolution, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use checkpoint::Checkpoint;
pub use commands::*;
pub use config::{fnv1a64, parse_assignments, NormalizationMode, RunConfig, SEED_ENV};

use crate::error::{Error, Result};

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Shared `--config`, `--set` and one `--<key>` flag per config key.
fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd
        .arg(Arg::new("config").short('c').long("config").value_name("FILE").help("key = value config file or run manifest"))
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override any config key"),
        );
    for key in RunConfig::KEYS {
        let mut arg = Arg::new(*key)
            .long(flag_name(key))
            .value_name("VALUE")
            .help_heading("Config overrides")
            .hide_short_help(true);
        arg = match *key {
            "num_inference_steps" => arg.visible_alias("steps"),
            "sample_labels" => arg.visible_alias("labels"),
            _ => arg,
        };
        cmd = cmd.arg(arg);
    }
    cmd
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).value_name("PATH").value_parser(clap::value_parser!(PathBuf)).required(true).help(help)
}

pub fn command() -> Command {
    Command::new("diffkit")
        .about("Train, sample and evaluate small denoising diffusion models")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_args(
            Command::new("train")
                .about("Train a noise-prediction UNet and write a checkpoint")
                .arg(path_arg("data", "CIFAR-10 binary file/directory or image folder"))
                .arg(path_arg("out", "output directory"))
                .arg(path_arg("vae", "VAE checkpoint from train-vae (latent runs)").required(false)),
        ))
        .subcommand(with_config_args(
            Command::new("train-vae")
                .about("Train the latent autoencoder and fit its latent scale")
                .arg(path_arg("data", "CIFAR-10 binary file/directory or image folder"))
                .arg(path_arg("out", "output directory")),
        ))
        .subcommand(with_config_args(
            Command::new("sample")
                .about("Generate images from a checkpoint")
                .arg(path_arg("checkpoint", "model checkpoint"))
                .arg(path_arg("out", "output directory")),
        ))
        .subcommand(with_config_args(
            Command::new("evaluate")
                .about("FID and Inception Score between two image folders")
                .arg(path_arg("real", "reference image folder (class subdirectories optional)"))
                .arg(path_arg("generated", "generated image folder"))
                .arg(path_arg("out", "output JSON file"))
                .arg(
                    Arg::new("classifier-epochs")
                        .long("classifier-epochs")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("30")
                        .help("training epochs of the feature classifier"),
                ),
        ))
        .subcommand(
            Command::new("schedule").about("Noise schedule utilities").subcommand_required(true).subcommand(
                with_config_args(
                    Command::new("dump")
                        .about("Write the beta/alpha table as CSV")
                        .arg(path_arg("out", "CSV file (default: stdout)").required(false)),
                ),
            ),
        )
}

fn overrides(m: &ArgMatches) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Usage(format!("--set expects KEY=VALUE, got '{kv}'")));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    for key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn file_layer(m: &ArgMatches) -> Result<Vec<(String, String)>> {
    match m.get_one::<String>("config") {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("config file {p}: {e}")))?;
            parse_assignments(&text)
        }
        None => Ok(Vec::new()),
    }
}

/// defaults < DIFFKIT_SEED < `base` < config file < flags.
pub fn resolve_config(m: &ArgMatches, base: Vec<(String, String)>) -> Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(env.as_deref(), &[base, file_layer(m)?, overrides(m)?])
}

fn path(m: &ArgMatches, id: &str) -> PathBuf {
    m.get_one::<PathBuf>(id).cloned().unwrap_or_default()
}

fn dispatch(m: &ArgMatches, stdout: &mut dyn Write, progress: &mut dyn Write) -> Result<()> {
    match m.subcommand() {
        Some(("train", m)) => {
            let args = TrainArgs {
                config: resolve_config(m, Vec::new())?,
                data: path(m, "data"),
                out: path(m, "out"),
                vae: m.get_one::<PathBuf>("vae").cloned(),
            };
            train_command(&args, progress).map(drop)
        }
        Some(("train-vae", m)) => {
            let args = TrainVaeArgs { config: resolve_config(m, Vec::new())?, data: path(m, "data"), out: path(m, "out") };
            train_vae_command(&args, progress).map(drop)
        }
        Some(("sample", m)) => {
            let ck_path = path(m, "checkpoint");
            require_path(&ck_path, "checkpoint")?;
            let base = checkpoint_layer(&Checkpoint::load(&ck_path)?)?;
            let args = SampleArgs { config: resolve_config(m, base)?, checkpoint: ck_path, out: path(m, "out") };
            sample_command(&args, progress).map(drop)
        }
        Some(("evaluate", m)) => {
            let args = EvaluateArgs {
                config: resolve_config(m, Vec::new())?,
                real: path(m, "real"),
                generated: path(m, "generated"),
                out: path(m, "out"),
                classifier_epochs: m.get_one::<usize>("classifier-epochs").copied().unwrap_or(30),
            };
            evaluate_command(&args, progress).map(drop)
        }
        Some(("schedule", m)) => match m.subcommand() {
            Some(("dump", m)) => {
                let cfg = resolve_config(m, Vec::new())?;
                schedule_dump_command(&cfg, m.get_one::<PathBuf>("out").map(|p| p.as_path()), stdout)
            }
            _ => Err(Error::Usage("unknown schedule subcommand".into())),
        },
        _ => Err(Error::Usage("unknown subcommand".into())),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(stdout, "{}", e.render()) } else { write!(stderr, "{}", e.render()) };
            return code;
        }
    };
    match dispatch(&matches, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn flags_and_set_reach_the_config() {
        let m = command()
            .try_get_matches_from(["diffkit", "schedule", "dump", "--steps", "50", "--set", "beta_schedule=cosine"])
            .unwrap();
        let (_, m) = m.subcommand().unwrap();
        let (_, m) = m.subcommand().unwrap();
        let ov = overrides(m).unwrap();
        assert!(ov.contains(&("num_inference_steps".into(), "50".into())));
        assert!(ov.contains(&("beta_schedule".into(), "cosine".into())));
    }

    #[test]
    fn usage_errors_exit_2() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["diffkit", "sample", "--checkpoint", "/nonexistent/x", "--out", "/tmp/y"], &mut o, &mut e), 2);
        assert_eq!(run(["diffkit", "bogus"], &mut o, &mut e), 2);
        assert_eq!(run(["diffkit", "schedule", "dump", "--beta-schedule", "cubic"], &mut o, &mut e), 2);
    }
}
