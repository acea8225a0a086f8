//! End-to-end synthetic domain-shift experiment: translation training,
//! style and edge measurements, and segmentation under four adaptation
//! pipelines (none, SemI2I fakes, gray world, histogram matching).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{gray_world, histogram_match};
use crate::core_math::sobel_gradients;
use crate::data_pipeline::{normalize, LabelRaster, RasterImage, ValueRange};
use crate::error::Result;
use crate::networks::{Domain, NetworkConfig};
use crate::segmentation::{finetune_unet, predict_map, train_unet, ConfusionMatrix, IouReport, SegConfig, SegModel};
use crate::synth::{channel_mean_distance, generate, SynthConfig};
use crate::tensor::Tensor;
use crate::translation::{generate_fake_dataset, LogRecord, TileOptions, TrainHooks, TrainingConfig, TranslationState};

/// Experiment settings. Training scenes come from domain A with labels;
/// test scenes are distinct content seen in domain B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub translation: TrainingConfig,
    pub segmentation: SegConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 0,
            synth: SynthConfig::default(),
            n_train: 48,
            n_test: 48,
            translation: TrainingConfig {
                num_epochs: 10,
                decay_epoch: 7,
                network: NetworkConfig {
                    base_channels: 16,
                    embedding_channels: 64,
                    num_res_blocks: 1,
                    ..NetworkConfig::small()
                },
                ..TrainingConfig::default()
            },
            segmentation: SegConfig {
                initial_iterations: 600,
                finetune_iterations: 300,
                batch_size: 8,
                lr: 1e-3,
                base_channels: 8,
                depth: 3,
                patch_size: 64,
                overlap: 16,
                ..SegConfig::default()
            },
        }
    }
}

/// Measurements of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub translation_iterations: u64,
    /// Weighted generator loss of the first iteration.
    pub first_total_g: f64,
    /// Weighted generator loss at iteration 200 (or the last one if fewer).
    pub total_g_at_200: f64,
    /// Channel-mean distances (normalized units) from A and from fake A to B.
    pub dist_a_to_b: f64,
    pub dist_fake_to_b: f64,
    /// Mean Sobel L1 between each A image and its fake.
    pub edge_l1_a_fake: f64,
    /// Mean Sobel L1 between distinct A images.
    pub edge_l1_within_a: f64,
    pub iou_unet: IouReport,
    pub iou_semi2i: IouReport,
    pub iou_gray_world: IouReport,
    pub iou_hist_match: IouReport,
    /// Wall-clock seconds of translation training and of the whole run.
    pub translation_secs: f64,
    pub total_secs: f64,
}

impl BenchmarkReport {
    pub fn style_ratio(&self) -> f64 {
        self.dist_fake_to_b / self.dist_a_to_b
    }

    pub fn edge_ratio(&self) -> f64 {
        self.edge_l1_a_fake / self.edge_l1_within_a
    }
}

struct LossTrace(Vec<f64>);

impl TrainHooks<f32> for LossTrace {
    fn on_step(&mut self, r: &LogRecord) -> Result<()> {
        self.0.push(r.losses.total_g);
        Ok(())
    }
}

fn sobel_l1(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    let (xg, xh) = sobel_gradients(x)?;
    let (yg, yh) = sobel_gradients(y)?;
    let n = (xg.numel() + xh.numel()) as f64;
    let s: f64 = xg
        .data()
        .iter()
        .zip(yg.data())
        .chain(xh.data().iter().zip(yh.data()))
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum();
    Ok(s / n)
}

fn evaluate(model: &SegModel<f32>, images: &[Tensor<f32>], labels: &[LabelRaster]) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (x, y) in images.iter().zip(labels) {
        cm.add(&predict_map(model, x)?, y)?;
    }
    Ok(cm.report())
}

/// Trains SemI2I on the A training scenes and the (unlabeled) B test
/// scenes, then returns the state and the translated training set.
pub fn translate_training_set(
    cfg: &BenchmarkConfig,
    a: &[Tensor<f32>],
    b: &[Tensor<f32>],
) -> Result<(TranslationState<f32>, Vec<Tensor<f32>>, Vec<f64>)> {
    let tcfg = TrainingConfig { rng_seed: cfg.seed, ..cfg.translation.clone() };
    let mut trace = LossTrace(Vec::new());
    let state = crate::translation::train(a, b, &tcfg, &mut trace)?;
    let tile = TileOptions { patch_size: cfg.synth.size, overlap: cfg.segmentation.overlap };
    let fakes = generate_fake_dataset(&state, a, Domain::A, &tile)?;
    Ok((state, fakes, trace.0))
}

fn signed(x: &Tensor<f32>) -> Result<RasterImage<f32>> {
    RasterImage::new(x.clone(), ValueRange::Signed)
}

/// Runs the whole experiment for `cfg.seed`.
pub fn run(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let synth_train = SynthConfig { seed: cfg.seed.wrapping_mul(2), ..cfg.synth.clone() };
    let synth_test = SynthConfig { seed: cfg.seed.wrapping_mul(2) + 1, ..cfg.synth.clone() };
    let train_pairs = generate(&synth_train, cfg.n_train)?;
    let test_pairs = generate(&synth_test, cfg.n_test)?;
    let a_img: Vec<RasterImage<f32>> = train_pairs.iter().map(|p| normalize(&p.a)).collect();
    let b_img: Vec<RasterImage<f32>> = test_pairs.iter().map(|p| normalize(&p.b)).collect();
    let a: Vec<Tensor<f32>> = a_img.iter().map(|r| r.pixels().clone()).collect();
    let b: Vec<Tensor<f32>> = b_img.iter().map(|r| r.pixels().clone()).collect();
    let a_labels: Vec<LabelRaster> = train_pairs.iter().map(|p| p.labels.clone()).collect();
    let b_labels: Vec<LabelRaster> = test_pairs.iter().map(|p| p.labels.clone()).collect();

    let (state, fakes, trace) = translate_training_set(cfg, &a, &b)?;
    let translation_secs = start.elapsed().as_secs_f64();
    let fake_img = fakes.iter().map(signed).collect::<Result<Vec<_>>>()?;
    let mut edge_fake = 0.0;
    for (x, f) in a.iter().zip(&fakes) {
        edge_fake += sobel_l1(x, f)?;
    }
    let mut edge_within = 0.0;
    for i in 0..a.len() {
        edge_within += sobel_l1(&a[i], &a[(i + 1) % a.len()])?;
    }

    let seg = SegConfig { rng_seed: cfg.seed, ..cfg.segmentation.clone() };
    let (base, _) = train_unet(&a, &a_labels, &seg)?;
    let iou_unet = evaluate(&base, &b, &b_labels)?;
    let (semi, _) = finetune_unet(base.clone(), &fakes, &a_labels, &seg)?;
    let iou_semi2i = evaluate(&semi, &b, &b_labels)?;

    let gw = a_img
        .iter()
        .map(|r| gray_world(r).map(|g| g.into_pixels()))
        .collect::<Result<Vec<_>>>()?;
    let (gw_model, _) = finetune_unet(base.clone(), &gw, &a_labels, &seg)?;
    let iou_gray_world = evaluate(&gw_model, &b, &b_labels)?;

    // Each training image is matched to a randomly drawn test image.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let hm = a_img
        .iter()
        .map(|r| histogram_match(r, &b_img[rng.random_range(0..b_img.len())]).map(|h| h.into_pixels()))
        .collect::<Result<Vec<_>>>()?;
    let (hm_model, _) = finetune_unet(base, &hm, &a_labels, &seg)?;
    let iou_hist_match = evaluate(&hm_model, &b, &b_labels)?;

    Ok(BenchmarkReport {
        seed: cfg.seed,
        translation_iterations: state.iteration(),
        first_total_g: trace.first().copied().unwrap_or(f64::NAN),
        total_g_at_200: trace.get(199).or(trace.last()).copied().unwrap_or(f64::NAN),
        dist_a_to_b: channel_mean_distance(&a_img, &b_img),
        dist_fake_to_b: channel_mean_distance(&fake_img, &b_img),
        edge_l1_a_fake: edge_fake / a.len() as f64,
        edge_l1_within_a: edge_within / a.len() as f64,
        iou_unet,
        iou_semi2i,
        iou_gray_world,
        iou_hist_match,
        translation_secs,
        total_secs: start.elapsed().as_secs_f64(),
    })
}
