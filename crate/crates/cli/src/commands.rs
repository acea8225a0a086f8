use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semi2i::baselines::{gray_world, histogram_match};
use semi2i::data_pipeline::{
    read_labels, write_image, write_labels, write_prediction_map, LabelRaster, Manifest, ManifestEntry, RasterImage,
    ValueRange,
};
use semi2i::networks::Domain;
use semi2i::segmentation::{predict_map, ConfusionMatrix, SegConfig, SegModel};
use semi2i::synth::{channel_mean_distance, generate, SynthConfig};
use semi2i::translation::{LogRecord, TileOptions, TrainHooks, TrainingConfig, TranslationState};
use semi2i::{Result as CoreResult, Tensor32};
use toml::Value;

use crate::config;
use crate::error::{io_err, CliError};

type Result<T> = std::result::Result<T, CliError>;
type Overrides = Vec<(Vec<String>, Value)>;

/// Standard subdirectories of an output root.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "fakes", "predictions", "reports", "logs"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn sub(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn echo<C: serde::Serialize>(&self, command: &str, cfg: &C) -> Result<()> {
        config::echo(cfg, &self.root.join(format!("{command}.config.toml")))
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(CliError::Data(format!("manifest {} does not exist", path.display())));
    }
    Ok(Manifest::load(path)?)
}

fn pixels(images: Vec<RasterImage<f32>>) -> Vec<Tensor32> {
    images.into_iter().map(RasterImage::into_pixels).collect()
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Data(format!("{} has no usable file name", path.display())))
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

/// Writes signed images into `dir` under their source stems, plus a
/// manifest that keeps the source labels.
fn write_image_set(dir: &Path, domain: &str, source: &Manifest, images: &[Tensor32]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(images.len());
    for (entry, x) in source.entries.iter().zip(images) {
        let name = format!("{}.png", stem(&entry.image)?);
        write_image(&dir.join(&name), &RasterImage::new(x.clone(), ValueRange::Signed)?)?;
        let label = entry.label.as_ref().map(|l| absolute(source.resolve(l)));
        entries.push(ManifestEntry { image: PathBuf::from(name), label });
    }
    let path = dir.join("manifest.toml");
    Manifest::new(domain, entries).save(&path)?;
    Ok(path)
}

// ---------------------------------------------------------------------------

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub n_images: usize,
    pub size: Option<usize>,
    pub min_gap: f64,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
}

pub fn synth_data(args: SynthArgs) -> Result<()> {
    let mut ov = args.overrides;
    if let Some(s) = args.seed {
        ov.push((vec!["seed".into()], Value::Integer(s as i64)));
    }
    if let Some(s) = args.size {
        ov.push((vec!["size".into()], Value::Integer(s as i64)));
    }
    let cfg: SynthConfig = config::resolve(args.config.as_deref(), &ov)?;
    if args.n_images == 0 {
        return Err(CliError::Usage("--n-images must be positive".into()));
    }
    let pairs = generate(&cfg, args.n_images)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    for domain in ["A", "B"] {
        let root = args.out.join(domain);
        for sub in ["images", "labels"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let mut entries = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            let name = format!("scene_{i:04}.png");
            let (img, lab) = (PathBuf::from("images").join(&name), PathBuf::from("labels").join(&name));
            write_image(&root.join(&img), if domain == "A" { &p.a } else { &p.b })?;
            write_labels(&root.join(&lab), &p.labels)?;
            entries.push(ManifestEntry { image: img, label: Some(lab) });
        }
        Manifest::new(domain, entries).save(&root.join("manifest.toml"))?;
    }
    config::echo(&cfg, &args.out.join("synth-data.config.toml"))?;
    let a: Vec<_> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<_> = pairs.iter().map(|p| p.b.clone()).collect();
    let gap = channel_mean_distance(&a, &b);
    println!("wrote {} scene pairs to {}; channel-mean gap {gap:.2}", pairs.len(), args.out.display());
    if gap <= args.min_gap {
        return Err(CliError::Data(format!(
            "channel-mean gap {gap:.2} does not exceed the threshold {}",
            args.min_gap
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub struct TranslateTrainArgs {
    pub manifest_a: PathBuf,
    pub manifest_b: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub overrides: Overrides,
}

/// Appends every step to a JSON-lines log and checkpoints after each epoch.
struct TrainLog {
    log: BufWriter<File>,
    log_path: PathBuf,
    checkpoint: PathBuf,
}

impl TrainHooks<f32> for TrainLog {
    fn on_step(&mut self, r: &LogRecord) -> CoreResult<()> {
        let line = serde_json::to_string(r).expect("log records serialize");
        writeln!(self.log, "{line}").map_err(|e| semi2i::Error::Io { path: self.log_path.clone(), source: e })
    }

    fn on_epoch_end(&mut self, state: &TranslationState<f32>) -> CoreResult<()> {
        self.log.flush().map_err(|e| semi2i::Error::Io { path: self.log_path.clone(), source: e })?;
        state.save(&self.checkpoint)
    }
}

pub fn translate_train(args: TranslateTrainArgs) -> Result<()> {
    let out = OutDir::create(&args.out)?;
    let checkpoint = args.checkpoint.unwrap_or_else(|| out.sub("checkpoints").join("translation.ckpt"));
    let mut state = if args.resume && checkpoint.is_file() {
        if args.config.is_some() || !args.overrides.is_empty() {
            return Err(CliError::Usage("--resume continues with the checkpoint's config; drop --config and overrides".into()));
        }
        TranslationState::<f32>::load(&checkpoint)?
    } else {
        let cfg: TrainingConfig = config::resolve(args.config.as_deref(), &args.overrides)?;
        TranslationState::new(&cfg)?
    };
    out.echo("translate-train", state.config())?;
    let a = pixels(load_manifest(&args.manifest_a)?.load_images()?);
    let b = pixels(load_manifest(&args.manifest_b)?.load_images()?);
    let log_path = out.sub("logs").join("translate-train.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(args.resume)
        .write(true)
        .truncate(!args.resume)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut hooks = TrainLog { log: BufWriter::new(file), log_path, checkpoint: checkpoint.clone() };
    state.run(&a, &b, &mut hooks)?;
    // An already finished state runs no epoch, so save unconditionally.
    state.save(&checkpoint)?;
    println!("trained {} iterations; checkpoint {}", state.iteration(), checkpoint.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub struct TranslateApplyArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub from: Domain,
    pub out: PathBuf,
    pub patch_size: usize,
    pub overlap: usize,
}

pub fn translate_apply(args: TranslateApplyArgs) -> Result<()> {
    let out = OutDir::create(&args.out)?;
    let state = TranslationState::<f32>::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let tile = TileOptions { patch_size: args.patch_size, overlap: args.overlap };
    out.echo("translate-apply", &tile)?;
    let images = pixels(manifest.load_images()?);
    let fakes = semi2i::translation::generate_fake_dataset(&state, &images, args.from, &tile)?;
    let target = match args.from.other() {
        Domain::A => "A",
        Domain::B => "B",
    };
    let path = write_image_set(&out.sub("fakes"), target, &manifest, &fakes)?;
    println!("wrote {} translated images; manifest {}", fakes.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub struct SegmentArgs {
    pub manifest: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub init: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub overrides: Overrides,
}

fn write_curve(path: &Path, start: u64, curve: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, loss) in curve.iter().enumerate() {
        let line = serde_json::json!({ "iteration": start + i as u64 + 1, "loss": loss });
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Trains from scratch (`init` absent) or fine-tunes a loaded model.
pub fn segment(args: SegmentArgs, finetune: bool) -> Result<()> {
    let command = if finetune { "segment-finetune" } else { "segment-train" };
    let out = OutDir::create(&args.out)?;
    let manifest = load_manifest(&args.manifest)?;
    let (mut model, iterations) = match &args.init {
        Some(init) => {
            if args.config.is_some() {
                return Err(CliError::Usage("fine-tuning keeps the loaded model's config; use overrides only".into()));
            }
            let mut model = SegModel::<f32>::load(init)?;
            let cfg: SegConfig = config::resolve_from(&model.config, None, &args.overrides)?;
            let arch = |c: &SegConfig| (c.num_classes, c.in_channels, c.base_channels, c.depth);
            if arch(&cfg) != arch(&model.config) {
                return Err(CliError::Usage("architecture fields cannot change when fine-tuning".into()));
            }
            cfg.validate()?;
            model.config = cfg.clone();
            (model, cfg.finetune_iterations)
        }
        None => {
            let cfg: SegConfig = config::resolve(args.config.as_deref(), &args.overrides)?;
            (SegModel::<f32>::new(&cfg)?, cfg.initial_iterations)
        }
    };
    out.echo(command, &model.config)?;
    let images = pixels(manifest.load_images()?);
    let labels = manifest.load_labels()?;
    let start = model.iterations();
    let curve = model.fit(&images, &labels, iterations)?;
    write_curve(&out.sub("logs").join(format!("{command}.jsonl")), start, &curve)?;
    let name = if finetune { "unet-finetuned.ckpt" } else { "unet.ckpt" };
    let checkpoint = args.checkpoint.unwrap_or_else(|| out.sub("checkpoints").join(name));
    model.save(&checkpoint)?;
    println!(
        "{command}: {iterations} iterations, final loss {:.4}; checkpoint {}",
        curve.last().copied().unwrap_or(f64::NAN),
        checkpoint.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn segment_predict(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let out = OutDir::create(out)?;
    let model = SegModel::<f32>::load(checkpoint)?;
    out.echo("segment-predict", &model.config)?;
    let manifest = load_manifest(manifest)?;
    let dir = out.sub("predictions");
    for (entry, image) in manifest.entries.iter().zip(manifest.load_images::<f32>()?) {
        let map = predict_map(&model, image.pixels())?;
        write_prediction_map(&dir.join(format!("{}.png", stem(&entry.image)?)), &map)?;
    }
    println!("wrote {} prediction maps to {}", manifest.entries.len(), dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn evaluate(predictions: &Path, ground_truth: &Path, num_classes: usize, out: &Path) -> Result<()> {
    if num_classes < 2 {
        return Err(CliError::Usage("--num-classes must be at least 2".into()));
    }
    let out = OutDir::create(out)?;
    let manifest = load_manifest(ground_truth)?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for (entry, gt) in manifest.entries.iter().zip(manifest.load_labels()?) {
        let path = predictions.join(format!("{}.png", stem(&entry.image)?));
        let pred: LabelRaster = read_labels(&path)?;
        cm.add(&pred, &gt)?;
    }
    let report = cm.report();
    let table = report.to_table();
    print!("{table}");
    let reports = out.sub("reports");
    std::fs::write(reports.join("iou.txt"), &table).map_err(|e| io_err(&reports, e))?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("json values serialize");
    std::fs::write(reports.join("iou.json"), json).map_err(|e| io_err(&reports, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    GrayWorld,
    HistMatch,
}

pub fn baseline_apply(
    method: Baseline,
    manifest: &Path,
    reference: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let out = OutDir::create(out)?;
    let source = load_manifest(manifest)?;
    let images = source.load_images::<f32>()?;
    let converted: Vec<Tensor32> = match method {
        Baseline::GrayWorld => {
            if reference.is_some() {
                return Err(CliError::Usage("gray-world takes no --reference".into()));
            }
            images.iter().map(|r| gray_world(r).map(RasterImage::into_pixels)).collect::<CoreResult<_>>()?
        }
        Baseline::HistMatch => {
            let path = reference.ok_or_else(|| CliError::Usage("hist-match needs --reference".into()))?;
            let refs = load_manifest(path)?.load_images::<f32>()?;
            if refs.is_empty() {
                return Err(CliError::Data(format!("reference manifest {} is empty", path.display())));
            }
            // Each image is matched to one reference image drawn at random.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            images
                .iter()
                .map(|r| histogram_match(r, &refs[rng.random_range(0..refs.len())]).map(RasterImage::into_pixels))
                .collect::<CoreResult<_>>()?
        }
    };
    out.echo("baseline-apply", &serde_json::json!({ "method": method, "seed": seed }))?;
    let path = write_image_set(&out.sub("fakes"), &source.domain, &source, &converted)?;
    println!("wrote {} converted images; manifest {}", converted.len(), path.display());
    Ok(())
}
