//! `semi2i`: synthetic data, translation training and application,
//! segmentation training, prediction, evaluation and color baselines.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semi2i::data_pipeline::{DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE, NUM_CLASSES};
use semi2i::networks::Domain;
use toml::Value;

use commands::Baseline;
use error::CliError;

#[derive(Parser)]
#[command(name = "semi2i", version, about = "Style translation for segmentation domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a config file.
#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set network.base_channels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired two-domain synthetic dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        n_images: usize,
        #[arg(long)]
        size: Option<usize>,
        /// Fail if the channel-mean gap between domains (0..255 units) is not above this.
        #[arg(long, default_value_t = 20.0)]
        min_gap: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the translation networks on two unlabeled domains.
    TranslateTrain {
        #[arg(long)]
        manifest_a: PathBuf,
        #[arg(long)]
        manifest_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint path; defaults to OUT/checkpoints/translation.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        decay_epoch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        d_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Translate every image of a manifest into the other domain.
    TranslateApply {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Domain of the input images.
        #[arg(long, value_enum, default_value = "a")]
        from: DomainArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
        patch_size: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: usize,
    },
    /// Train a U-net on a labeled manifest.
    SegmentTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Continue training a U-net on another labeled manifest.
    SegmentFinetune {
        /// Model to start from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Override a field of the loaded model's config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Predict class maps for every image of a manifest.
    SegmentPredict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction maps against a labeled manifest.
    Evaluate {
        /// Directory of `<image stem>.png` class maps.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, default_value_t = NUM_CLASSES)]
        num_classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a color-constancy baseline to every image of a manifest.
    BaselineApply {
        #[arg(long, value_enum)]
        method: Baseline,
        #[arg(long)]
        manifest: PathBuf,
        /// Reference images for histogram matching.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides(set: &[String]) -> Result<Vec<(Vec<String>, Value)>, CliError> {
    set.iter().map(|s| config::parse_override(s)).collect()
}

fn push<V: Into<Value>>(ov: &mut Vec<(Vec<String>, Value)>, key: &str, v: Option<V>) {
    if let Some(v) = v {
        ov.push((key.split('.').map(str::to_string).collect(), v.into()));
    }
}

fn int(v: Option<impl TryInto<i64>>) -> Result<Option<i64>, CliError> {
    v.map(|x| x.try_into().map_err(|_| CliError::Usage("integer flag out of range".into())))
        .transpose()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData { out, seed, n_images, size, min_gap, cfg } => commands::synth_data(commands::SynthArgs {
            out,
            seed,
            n_images,
            size,
            min_gap,
            config: cfg.config,
            overrides: overrides(&cfg.set)?,
        }),
        Command::TranslateTrain { manifest_a, manifest_b, out, checkpoint, resume, epochs, decay_epoch, lr, d_rate, seed, cfg } => {
            let mut ov = overrides(&cfg.set)?;
            push(&mut ov, "num_epochs", int(epochs)?);
            push(&mut ov, "decay_epoch", int(decay_epoch)?);
            push(&mut ov, "base_lr", lr);
            push(&mut ov, "d_rate", d_rate);
            push(&mut ov, "rng_seed", int(seed)?);
            commands::translate_train(commands::TranslateTrainArgs {
                manifest_a,
                manifest_b,
                config: cfg.config,
                out,
                checkpoint,
                resume,
                overrides: ov,
            })
        }
        Command::TranslateApply { checkpoint, manifest, from, out, patch_size, overlap } => {
            let from = match from {
                DomainArg::A => Domain::A,
                DomainArg::B => Domain::B,
            };
            commands::translate_apply(commands::TranslateApplyArgs { checkpoint, manifest, from, out, patch_size, overlap })
        }
        Command::SegmentTrain { manifest, out, checkpoint, iterations, batch_size, lr, seed, cfg } => {
            let mut ov = overrides(&cfg.set)?;
            push(&mut ov, "initial_iterations", int(iterations)?);
            push(&mut ov, "batch_size", int(batch_size)?);
            push(&mut ov, "lr", lr);
            push(&mut ov, "rng_seed", int(seed)?);
            commands::segment(
                commands::SegmentArgs { manifest, config: cfg.config, out, init: None, checkpoint, overrides: ov },
                false,
            )
        }
        Command::SegmentFinetune { init, manifest, out, checkpoint, iterations, lr, set } => {
            let mut ov = overrides(&set)?;
            push(&mut ov, "finetune_iterations", int(iterations)?);
            push(&mut ov, "lr", lr);
            commands::segment(
                commands::SegmentArgs { manifest, config: None, out, init: Some(init), checkpoint, overrides: ov },
                true,
            )
        }
        Command::SegmentPredict { checkpoint, manifest, out } => commands::segment_predict(&checkpoint, &manifest, &out),
        Command::Evaluate { predictions, ground_truth, num_classes, out } => {
            commands::evaluate(&predictions, &ground_truth, num_classes, &out)
        }
        Command::BaselineApply { method, manifest, reference, seed, out } => {
            commands::baseline_apply(method, &manifest, reference.as_deref(), seed, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semi2i: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
