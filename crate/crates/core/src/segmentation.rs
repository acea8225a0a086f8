//! U-net training, fine-tuning, tiled prediction and IoU evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Archive;
use crate::data_pipeline::{map_tiled, LabelRaster, CLASS_NAMES, DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE};
use crate::error::{invalid_input, Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{Adam, Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "semi2i-unet";

/// U-net training hyperparameters and architecture width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub initial_iterations: usize,
    pub finetune_iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Class count, background included.
    pub num_classes: usize,
    pub in_channels: usize,
    /// Width of the first level; each of the `depth` levels doubles it.
    pub base_channels: usize,
    pub depth: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub rng_seed: u64,
    /// Tiling used by whole-raster prediction.
    pub patch_size: usize,
    pub overlap: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            initial_iterations: 8000,
            finetune_iterations: 2500,
            batch_size: 32,
            lr: 1e-4,
            num_classes: 4,
            in_channels: 3,
            base_channels: 16,
            depth: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            rng_seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.num_classes < 2 || self.in_channels == 0 || self.base_channels == 0 {
            return bad("batch_size, in_channels and base_channels must be positive and num_classes >= 2".into());
        }
        if self.num_classes > 256 {
            return bad("at most 256 classes fit in 8-bit labels".into());
        }
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.patch_size % self.spatial_multiple() != 0 || self.overlap >= self.patch_size {
            return bad(format!(
                "patch_size {} must be a multiple of {} and exceed overlap {}",
                self.patch_size,
                self.spatial_multiple(),
                self.overlap
            ));
        }
        Ok(())
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl Conv {
    /// He-normal weights, zero bias.
    fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, geom: ConvGeom, rng: &mut impl Rng) -> Self {
        let k = geom.kernel;
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv {
            w: ps.gaussian(format!("{name}.weight"), [cout, cin, k, k], std, rng),
            b: ps.zeros(format!("{name}.bias"), [1, cout, 1, 1]),
            geom,
        }
    }

    /// Border-replicating "same" convolution.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let x = g.pad_replicate(x, self.geom.kernel / 2);
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.geom)
    }
}

/// Encoder-decoder with skip connections: two 3x3 conv + ReLU per level,
/// 2x2 max-pool down; up-steps are a 2x bilinear resize followed by a 3x3
/// conv halving the width. Convolutions replicate the border instead of
/// zero padding, so a constant input yields a constant output.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub params: ParamSet<T>,
    num_classes: usize,
    in_channels: usize,
    multiple: usize,
    down: Vec<(Conv, Conv)>,
    up: Vec<(Conv, Conv, Conv)>,
    head: Conv,
}

impl<T: Scalar> UNet<T> {
    pub fn new(cfg: &SegConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let c3 = ConvGeom::new(3, 1, 0);
        let width = |l: usize| cfg.base_channels << l;
        let down = (0..=cfg.depth)
            .map(|l| {
                let cin = if l == 0 { cfg.in_channels } else { width(l - 1) };
                (
                    Conv::new(&mut ps, &format!("down{l}.conv0"), cin, width(l), c3, rng),
                    Conv::new(&mut ps, &format!("down{l}.conv1"), width(l), width(l), c3, rng),
                )
            })
            .collect();
        let up = (0..cfg.depth)
            .rev()
            .map(|l| {
                (
                    Conv::new(&mut ps, &format!("up{l}.upconv"), width(l + 1), width(l), c3, rng),
                    Conv::new(&mut ps, &format!("up{l}.conv0"), 2 * width(l), width(l), c3, rng),
                    Conv::new(&mut ps, &format!("up{l}.conv1"), width(l), width(l), c3, rng),
                )
            })
            .collect();
        let head = Conv::new(&mut ps, "head", width(0), cfg.num_classes, ConvGeom::new(1, 1, 0), rng);
        Ok(UNet {
            params: ps,
            num_classes: cfg.num_classes,
            in_channels: cfg.in_channels,
            multiple: cfg.spatial_multiple(),
            down,
            up,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let m = self.multiple;
        if shape[1] != self.in_channels || shape[2] == 0 || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(invalid_input!(
                "U-net needs {} channels and sides divisible by {m}, got {:?}",
                self.in_channels,
                shape
            ));
        }
        Ok(())
    }

    /// Class logits `[N, classes, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for (i, (c0, c1)) in self.down.iter().enumerate() {
            if i > 0 {
                h = g.max_pool2(h);
            }
            let t = c0.forward(g, p, h);
            let t = g.relu(t);
            let t = c1.forward(g, p, t);
            h = g.relu(t);
            skips.push(h);
        }
        skips.pop();
        for (upc, c0, c1) in &self.up {
            let [_, _, hh, ww] = g.shape(h);
            let u = g.resize_bilinear(h, 2 * hh, 2 * ww);
            let u = upc.forward(g, p, u);
            let u = g.relu(u);
            let skip = skips.pop().expect("one skip per level");
            let t = g.concat(skip, u);
            let t = c0.forward(g, p, t);
            let t = g.relu(t);
            let t = c1.forward(g, p, t);
            h = g.relu(t);
        }
        self.head.forward(g, p, h)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv);
        Ok(g.value(y).clone())
    }
}

/// A U-net with its optimizer and sampling state, so that training can be
/// continued exactly.
#[derive(Debug, Clone)]
pub struct SegModel<T: Scalar> {
    pub config: SegConfig,
    pub net: UNet<T>,
    opt: Adam<T>,
    rng: ChaCha8Rng,
    iterations: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegMeta {
    config: SegConfig,
    iterations: u64,
    adam_steps: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: String,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(cfg: &SegConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let net = UNet::new(cfg, &mut rng)?;
        let opt = Adam::new(&net.params, cfg.adam_beta1, cfg.adam_beta2);
        Ok(SegModel { config: cfg.clone(), net, opt, rng, iterations: 0 })
    }

    /// Optimizer steps taken so far.
    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// Runs `iterations` Adam steps on random mini-batches (drawn with
    /// replacement) and returns the loss of each step.
    pub fn fit(&mut self, images: &[Tensor<T>], labels: &[LabelRaster], iterations: usize) -> Result<Vec<f64>> {
        check_dataset(images, labels, self.config.num_classes)?;
        if iterations == 0 {
            return Ok(Vec::new());
        }
        self.net.check_input(images[0].shape())?;
        let lr = T::lit(self.config.lr);
        let mut curve = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let idx: Vec<usize> = (0..self.config.batch_size)
                .map(|_| self.rng.random_range(0..images.len()))
                .collect();
            let batch: Vec<&Tensor<T>> = idx.iter().map(|&i| &images[i]).collect();
            let x = Tensor::stack(&batch)?;
            let y: Vec<u8> = idx.iter().flat_map(|&i| labels[i].data().iter().copied()).collect();
            let mut g = Graph::new();
            let p = self.net.params.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = self.net.forward(&mut g, &p, xv);
            let loss = g.cross_entropy(logits, y);
            let l = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
            if !l.is_finite() {
                return Err(Error::Numerical(format!(
                    "segmentation loss is not finite at iteration {}",
                    self.iterations + 1
                )));
            }
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads, &self.net.params);
            self.opt.update(&mut self.net.params, &grads, lr);
            self.iterations += 1;
            curve.push(l);
        }
        Ok(curve)
    }

    /// Mean cross-entropy over a dataset, without updating anything.
    pub fn mean_loss(&self, images: &[Tensor<T>], labels: &[LabelRaster]) -> Result<f64> {
        check_dataset(images, labels, self.config.num_classes)?;
        let mut total = 0.0;
        for (x, y) in images.iter().zip(labels) {
            self.net.check_input(x.shape())?;
            let mut g = Graph::new();
            let p = self.net.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let logits = self.net.forward(&mut g, &p, xv);
            let loss = g.cross_entropy(logits, y.data().to_vec());
            total += g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        }
        Ok(total / images.len() as f64)
    }

    pub fn to_archive(&self) -> Archive<T> {
        let meta = SegMeta {
            config: self.config.clone(),
            iterations: self.iterations,
            adam_steps: self.opt.steps(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let mut ar = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        let (m, v) = self.opt.moments();
        for (name, t) in self.net.params.iter() {
            ar.push(format!("unet/{name}"), t.clone());
        }
        for ((name, _), (m, v)) in self.net.params.iter().zip(m.iter().zip(v)) {
            ar.push(format!("adam/m/{name}"), m.clone());
            ar.push(format!("adam/v/{name}"), v.clone());
        }
        ar
    }

    pub fn from_archive(ar: &Archive<T>) -> Result<Self> {
        if ar.kind != CHECKPOINT_KIND {
            return Err(Error::InvalidCheckpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ar.kind)));
        }
        let meta: SegMeta = ar.meta_as()?;
        let mut s = Self::new(&meta.config).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        s.net
            .params
            .load_from(|n| ar.get(&format!("unet/{n}")).cloned())
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in s.net.params.iter() {
            m.push(ar.require(&format!("adam/m/{name}"))?.clone());
            v.push(ar.require(&format!("adam/v/{name}"))?.clone());
        }
        s.opt
            .restore(meta.adam_steps, m, v)
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        s.iterations = meta.iterations;
        let pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::InvalidCheckpoint("bad rng word position".into()))?;
        s.rng = ChaCha8Rng::from_seed(meta.rng_seed);
        s.rng.set_stream(meta.rng_stream);
        s.rng.set_word_pos(pos);
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn check_dataset<T: Scalar>(images: &[Tensor<T>], labels: &[LabelRaster], classes: usize) -> Result<()> {
    if images.is_empty() {
        return Err(invalid_input!("empty training set"));
    }
    if images.len() != labels.len() {
        return Err(invalid_input!("{} images but {} label rasters", images.len(), labels.len()));
    }
    let shape = images[0].shape();
    for (x, y) in images.iter().zip(labels) {
        if x.shape() != shape || x.batch() != 1 {
            return Err(invalid_input!("training patches must share one [1, C, H, W] shape"));
        }
        if (y.height(), y.width()) != (x.height(), x.width()) {
            return Err(invalid_input!(
                "label raster {}x{} does not match image {}x{}",
                y.height(),
                y.width(),
                x.height(),
                x.width()
            ));
        }
        if let Some(bad) = y.data().iter().find(|&&v| v as usize >= classes) {
            return Err(invalid_input!("class id {bad} outside 0..{classes}"));
        }
    }
    Ok(())
}

/// Trains a fresh U-net for `cfg.initial_iterations` steps. Returns the
/// model and its per-step loss curve.
pub fn train_unet<T: Scalar>(images: &[Tensor<T>], labels: &[LabelRaster], cfg: &SegConfig) -> Result<(SegModel<T>, Vec<f64>)> {
    let mut model = SegModel::new(cfg)?;
    check_dataset(images, labels, cfg.num_classes)?;
    let curve = model.fit(images, labels, cfg.initial_iterations)?;
    Ok((model, curve))
}

/// Continues training `model` on fake images paired with the original
/// labels for `cfg.finetune_iterations` steps. Weights, optimizer moments
/// and the sampling stream carry over.
pub fn finetune_unet<T: Scalar>(
    mut model: SegModel<T>,
    fakes: &[Tensor<T>],
    labels: &[LabelRaster],
    cfg: &SegConfig,
) -> Result<(SegModel<T>, Vec<f64>)> {
    check_dataset(fakes, labels, model.config.num_classes)?;
    let curve = model.fit(fakes, labels, cfg.finetune_iterations)?;
    Ok((model, curve))
}

/// Per-pixel argmax (lowest class wins ties) of a `[1, C, H, W]` score map.
pub fn argmax_map<T: Scalar>(scores: &Tensor<T>) -> Result<LabelRaster> {
    let [_, c, h, w] = scores.shape();
    let data = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if scores.plane_slice(0, k)[p] > scores.plane_slice(0, best)[p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelRaster::with_classes(h, w, data, c)
}

/// Whole-raster prediction: tiled inference with class scores averaged in
/// overlaps, then argmax. `raster` must be normalized to `[-1, 1]`.
pub fn predict_map<T: Scalar>(model: &SegModel<T>, raster: &Tensor<T>) -> Result<LabelRaster> {
    let cfg = &model.config;
    let scores = map_tiled(raster, cfg.patch_size, cfg.overlap, cfg.spatial_multiple(), |x| model.net.logits(x))?;
    argmax_map(&scores)
}

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelRaster, gt: &LabelRaster) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(invalid_input!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        let k = self.num_classes;
        if let Some(v) = pred.data().iter().chain(gt.data()).find(|&&v| v as usize >= k) {
            return Err(invalid_input!("class id {v} outside 0..{k}"));
        }
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// prediction and ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.count(c, c);
        let gt: u64 = (0..self.num_classes).map(|p| self.count(c, p)).sum();
        let pred: u64 = (0..self.num_classes).map(|t| self.count(t, c)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.num_classes).map(|c| self.iou(c)).collect();
        IouReport { overall: overall_iou(&per_class), per_class }
    }
}

/// Unweighted mean over the defined foreground classes (index 0 is
/// background and never counts).
pub fn overall_iou(per_class: &[Option<f64>]) -> Option<f64> {
    let fg: Vec<f64> = per_class.iter().skip(1).flatten().copied().collect();
    (!fg.is_empty()).then(|| fg.iter().sum::<f64>() / fg.len() as f64)
}

/// Per-class IoU (fractions in `[0, 1]`) and the foreground mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

impl IouReport {
    /// Percentages, one row per class, then `Overall`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: Option<f64>| v.map_or("     n/a".to_string(), |v| format!("{:8.2}", 100.0 * v));
        for (c, v) in self.per_class.iter().enumerate() {
            let name = CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string());
            let _ = writeln!(s, "{name:<12}{}", pct(*v));
        }
        let _ = writeln!(s, "{:<12}{}", "Overall", pct(self.overall));
        s
    }

    /// JSON with class names as keys.
    pub fn to_json(&self) -> serde_json::Value {
        let classes: serde_json::Map<String, serde_json::Value> = self
            .per_class
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let name = CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string());
                (name, serde_json::json!(v))
            })
            .collect();
        serde_json::json!({ "per_class_iou": classes, "overall_iou": self.overall })
    }
}

/// Per-class and overall IoU of one prediction.
pub fn evaluate_iou(pred: &LabelRaster, gt: &LabelRaster, num_classes: usize) -> Result<IouReport> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.add(pred, gt)?;
    Ok(m.report())
}
