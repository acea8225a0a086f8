//! Training loop, learning-rate schedule, global style statistics and
//! deterministic fake-dataset generation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Archive;
use crate::core_math::{ema_update, instance_stats, ChannelStats};
use crate::data_pipeline::{map_tiled, sample_pair_indices};
use crate::error::{invalid_input, Error, Result};
use crate::losses::{self, total_losses, LossComponents, LossReport, LossWeights};
use crate::networks::{translate, Decoder, Discriminator, Domain, Encoder, NetworkConfig};
use crate::params::{Adam, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "semi2i-translation";

/// Hyperparameters of translation training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub num_epochs: usize,
    pub base_lr: f64,
    /// First zero-based epoch of the linear decay.
    pub decay_epoch: usize,
    pub weights: LossWeights,
    /// EMA keep rate for the global style statistics.
    pub d_rate: f64,
    /// Patches drawn from each domain per iteration.
    pub patches_per_iteration: usize,
    /// adaIN and instance-norm epsilon.
    pub eps: f64,
    pub rng_seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub network: NetworkConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            num_epochs: 25,
            base_lr: 0.001,
            decay_epoch: 15,
            weights: LossWeights::default(),
            d_rate: 0.95,
            patches_per_iteration: 1,
            eps: 1e-5,
            rng_seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        // decay_epoch >= num_epochs leaves the rate constant (short runs).
        if self.num_epochs == 0 || self.decay_epoch == 0 {
            return bad(format!(
                "need num_epochs > 0 and decay_epoch > 0, got {} and {}",
                self.num_epochs, self.decay_epoch
            ));
        }
        if !(self.d_rate > 0.0 && self.d_rate < 1.0) {
            return bad(format!("d_rate must lie in (0, 1), got {}", self.d_rate));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if self.patches_per_iteration == 0 {
            return bad("patches_per_iteration must be positive".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam betas must lie in [0, 1), got {b}"));
            }
        }
        self.weights.validate()?;
        self.network.validate()
    }
}

/// Learning rate of a zero-based epoch: constant until `decay_epoch` (for
/// the whole run if that is not below `num_epochs`), then linear decay `base_lr * (num_epochs - epoch) / (num_epochs - decay_epoch)`.
pub fn lr_schedule(epoch_no: usize, cfg: &TrainingConfig) -> Result<f64> {
    if epoch_no >= cfg.num_epochs {
        return Err(invalid_input!("epoch {epoch_no} outside 0..{}", cfg.num_epochs));
    }
    if epoch_no < cfg.decay_epoch {
        return Ok(cfg.base_lr);
    }
    let left = (cfg.num_epochs - epoch_no) as f64;
    let span = (cfg.num_epochs - cfg.decay_epoch) as f64;
    Ok(cfg.base_lr * left / span)
}

/// One line of the per-iteration loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Callbacks invoked by [`TranslationState::run`].
pub trait TrainHooks<T: Scalar> {
    fn on_step(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every completed epoch, including the last.
    fn on_epoch_end(&mut self, _state: &TranslationState<T>) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl<T: Scalar> TrainHooks<T> for NoHooks {}

/// Generator-side values of one forward pass.
struct GeneratorPass<T> {
    g: Graph<T>,
    bound: Vec<crate::params::Bound>,
    total: Var,
    terms: [Var; 4],
    emb_a: Var,
    emb_b: Var,
    fake_a: Var,
    fake_b: Var,
}

/// Everything needed to continue or reproduce training: the four generator
/// networks, both discriminators, optimizer moments, global statistics,
/// counters and the generator state.
#[derive(Debug, Clone)]
pub struct TranslationState<T: Scalar> {
    config: TrainingConfig,
    pub enc_a: Encoder<T>,
    pub enc_b: Encoder<T>,
    pub dec_a: Decoder<T>,
    pub dec_b: Decoder<T>,
    pub disc_a: Discriminator<T>,
    pub disc_b: Discriminator<T>,
    pub global_a: ChannelStats<T>,
    pub global_b: ChannelStats<T>,
    /// One optimizer per network, in [`NET_NAMES`] order.
    opts: Vec<Adam<T>>,
    epoch: usize,
    /// Iterations completed within the current epoch.
    epoch_iteration: u64,
    /// Iterations completed overall.
    iteration: u64,
    rng: ChaCha8Rng,
}

/// Network names used as checkpoint prefixes.
pub const NET_NAMES: [&str; 6] = ["enc_a", "enc_b", "dec_a", "dec_b", "disc_a", "disc_b"];

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainingConfig,
    epoch: usize,
    epoch_iteration: u64,
    iteration: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal string: the word position is a u128.
    rng_word_pos: String,
    adam_steps: Vec<u64>,
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.scalar(v).to_f64().unwrap_or(f64::NAN)
}

impl<T: Scalar> TranslationState<T> {
    /// Fresh networks drawn from `cfg.rng_seed`; global stats start at zero.
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let net = &cfg.network;
        let enc_a = Encoder::new(net, &mut rng)?;
        let enc_b = Encoder::new(net, &mut rng)?;
        let dec_a = Decoder::new(net, &mut rng)?;
        let dec_b = Decoder::new(net, &mut rng)?;
        let disc_a = Discriminator::new(net, &mut rng)?;
        let disc_b = Discriminator::new(net, &mut rng)?;
        let mut s = TranslationState {
            config: cfg.clone(),
            enc_a,
            enc_b,
            dec_a,
            dec_b,
            disc_a,
            disc_b,
            global_a: ChannelStats::zeros(net.embedding_channels),
            global_b: ChannelStats::zeros(net.embedding_channels),
            opts: Vec::new(),
            epoch: 0,
            epoch_iteration: 0,
            iteration: 0,
            rng,
        };
        s.opts = s
            .param_sets()
            .iter()
            .map(|p| Adam::new(p, cfg.adam_beta1, cfg.adam_beta2))
            .collect();
        Ok(s)
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed iterations overall.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.num_epochs
    }

    pub fn encoder(&self, d: Domain) -> &Encoder<T> {
        match d {
            Domain::A => &self.enc_a,
            Domain::B => &self.enc_b,
        }
    }

    pub fn decoder(&self, d: Domain) -> &Decoder<T> {
        match d {
            Domain::A => &self.dec_a,
            Domain::B => &self.dec_b,
        }
    }

    pub fn discriminator(&self, d: Domain) -> &Discriminator<T> {
        match d {
            Domain::A => &self.disc_a,
            Domain::B => &self.disc_b,
        }
    }

    pub fn global_stats(&self, d: Domain) -> &ChannelStats<T> {
        match d {
            Domain::A => &self.global_a,
            Domain::B => &self.global_b,
        }
    }

    /// Parameter sets in [`NET_NAMES`] order.
    pub fn param_sets(&self) -> [&ParamSet<T>; 6] {
        [
            &self.enc_a.params,
            &self.enc_b.params,
            &self.dec_a.params,
            &self.dec_b.params,
            &self.disc_a.params,
            &self.disc_b.params,
        ]
    }

    /// Generator parameter sets (encoders then decoders), mutable.
    pub fn generator_params_mut(&mut self) -> [&mut ParamSet<T>; 4] {
        [
            &mut self.enc_a.params,
            &mut self.enc_b.params,
            &mut self.dec_a.params,
            &mut self.dec_b.params,
        ]
    }

    fn check_patch(&self, x: &Tensor<T>) -> Result<()> {
        self.enc_a.check_input(x.shape())?;
        self.disc_a.output_size(x.height(), x.width())?;
        if !x.data().iter().all(|v| *v >= -T::one() && *v <= T::one()) {
            return Err(invalid_input!("training patches must be normalized to [-1, 1]"));
        }
        Ok(())
    }

    /// Builds the full generator graph with generator parameters trainable
    /// and discriminator parameters frozen.
    fn generator_pass(&self, a: &Tensor<T>, b: &Tensor<T>) -> GeneratorPass<T> {
        let eps = T::lit(self.config.eps);
        let w = self.config.weights;
        let mut g = Graph::new();
        let gens = [&self.enc_a.params, &self.enc_b.params, &self.dec_a.params, &self.dec_b.params];
        let bound: Vec<_> = gens.iter().map(|p| p.bind(&mut g, true)).collect();
        let pda = self.disc_a.params.bind(&mut g, false);
        let pdb = self.disc_b.params.bind(&mut g, false);
        let (pea, peb, pxa, pxb) = (&bound[0], &bound[1], &bound[2], &bound[3]);

        let xa = g.constant(a.clone());
        let xb = g.constant(b.clone());
        let (ea, la) = self.enc_a.forward(&mut g, pea, xa);
        let (eb, lb) = self.enc_b.forward(&mut g, peb, xb);
        // Style statistics of the counterpart patch.
        let (mua, sda) = (g.channel_mean(ea), g.channel_std(ea));
        let (mub, sdb) = (g.channel_mean(eb), g.channel_std(eb));

        let ea_as_b = g.adain(ea, mub, sdb, eps);
        let fake_a = self.dec_b.forward(&mut g, pxb, ea_as_b, la);
        let eb_as_a = g.adain(eb, mua, sda, eps);
        let fake_b = self.dec_a.forward(&mut g, pxa, eb_as_a, lb);

        let self_a = self.dec_a.forward(&mut g, pxa, ea, la);
        let self_b = self.dec_b.forward(&mut g, pxb, eb, lb);

        let (efa, lfa) = self.enc_b.forward(&mut g, peb, fake_a);
        let efa = g.adain(efa, mua, sda, eps);
        let rec_a = self.dec_a.forward(&mut g, pxa, efa, lfa);
        let (efb, lfb) = self.enc_a.forward(&mut g, pea, fake_b);
        let efb = g.adain(efb, mub, sdb, eps);
        let rec_b = self.dec_b.forward(&mut g, pxb, efb, lfb);

        let cross = losses::pair_l1(&mut g, xa, rec_a, xb, rec_b);
        let selfl = losses::pair_l1(&mut g, xa, self_a, xb, self_b);
        let grad = losses::gradient_l1(&mut g, xa, fake_a, xb, fake_b);
        let d_fake_a = self.disc_b.forward(&mut g, &pdb, fake_a);
        let d_fake_b = self.disc_a.forward(&mut g, &pda, fake_b);
        let adv = losses::adv_generator(&mut g, d_fake_a, d_fake_b);

        let terms = [cross, selfl, grad, adv];
        let weighted: Vec<Var> = terms
            .iter()
            .zip([w.lambda1, w.lambda2, w.lambda3, w.lambda4])
            .map(|(&t, l)| g.scale(t, T::lit(l)))
            .collect();
        let total = g.sum_all(&weighted);
        GeneratorPass { g, bound, total, terms, emb_a: ea, emb_b: eb, fake_a, fake_b }
    }

    /// Value of the weighted generator objective and its gradient with
    /// respect to every generator parameter (encoders then decoders).
    pub fn generator_objective(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<(T, Vec<Vec<Tensor<T>>>)> {
        self.check_patch(a)?;
        self.check_patch(b)?;
        let pass = self.generator_pass(a, b);
        let mut grads = pass.g.backward(pass.total);
        let gens = [&self.enc_a.params, &self.enc_b.params, &self.dec_a.params, &self.dec_b.params];
        let per_set = pass.bound.iter().zip(gens).map(|(bd, p)| bd.gradients(&mut grads, p)).collect();
        Ok((pass.g.scalar(pass.total), per_set))
    }

    /// One training iteration at the scheduled learning rate of the
    /// current epoch.
    pub fn train_step(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<LossReport> {
        let lr = lr_schedule(self.epoch, &self.config)?;
        self.train_step_with_lr(a, b, lr)
    }

    /// One training iteration: generator update, discriminator update (on
    /// detached fakes from the same forward pass), then one EMA update of
    /// each domain's global statistics.
    pub fn train_step_with_lr(&mut self, a: &Tensor<T>, b: &Tensor<T>, lr: f64) -> Result<LossReport> {
        self.check_patch(a)?;
        self.check_patch(b)?;
        let pass = self.generator_pass(a, b);
        let g = &pass.g;
        let [cross, selfl, grad, adv_g] = pass.terms.map(|v| scalar(g, v));
        let fake_a = g.value(pass.fake_a).clone();
        let fake_b = g.value(pass.fake_b).clone();
        let cur_a = instance_stats(g.value(pass.emb_a))?;
        let cur_b = instance_stats(g.value(pass.emb_b))?;

        // Discriminator objective on the detached fakes.
        let mut dg = Graph::new();
        let pda = self.disc_a.params.bind(&mut dg, true);
        let pdb = self.disc_b.params.bind(&mut dg, true);
        let (xa, xb) = (dg.constant(a.clone()), dg.constant(b.clone()));
        let (fa, fb) = (dg.constant(fake_a), dg.constant(fake_b));
        let d_real_a = self.disc_a.forward(&mut dg, &pda, xa);
        let d_fake_b = self.disc_a.forward(&mut dg, &pda, fb);
        let d_real_b = self.disc_b.forward(&mut dg, &pdb, xb);
        let d_fake_a = self.disc_b.forward(&mut dg, &pdb, fa);
        let adv_d = losses::adv_discriminator(&mut dg, d_real_a, d_fake_a, d_real_b, d_fake_b);
        let total_d = dg.scale(adv_d, T::lit(self.config.weights.lambda4));

        let report = total_losses(
            LossComponents { cross, self_: selfl, grad, adv_g, adv_d: scalar(&dg, adv_d) },
            &self.config.weights,
        );
        if let Some(term) = report.first_non_finite() {
            return Err(Error::Numerical(format!(
                "{term} loss is not finite at iteration {}",
                self.iteration + 1
            )));
        }

        let lr_t = T::lit(lr);
        let mut grads = pass.g.backward(pass.total);
        let gen_grads: Vec<_> = {
            let gens = [&self.enc_a.params, &self.enc_b.params, &self.dec_a.params, &self.dec_b.params];
            pass.bound.iter().zip(gens).map(|(bd, p)| bd.gradients(&mut grads, p)).collect()
        };
        drop(grads);
        let mut dgrads = dg.backward(total_d);
        let ga = pda.gradients(&mut dgrads, &self.disc_a.params);
        let gb = pdb.gradients(&mut dgrads, &self.disc_b.params);

        let targets = [
            &mut self.enc_a.params,
            &mut self.enc_b.params,
            &mut self.dec_a.params,
            &mut self.dec_b.params,
        ];
        for ((opt, params), gr) in self.opts.iter_mut().zip(targets).zip(&gen_grads) {
            opt.update(params, gr, lr_t);
        }
        self.opts[4].update(&mut self.disc_a.params, &ga, lr_t);
        self.opts[5].update(&mut self.disc_b.params, &gb, lr_t);
        if let Some(i) = self.param_sets().iter().position(|p| !p.all_finite()) {
            return Err(Error::Numerical(format!(
                "{} parameters became non-finite at iteration {}",
                NET_NAMES[i],
                self.iteration + 1
            )));
        }

        let d_rate = T::lit(self.config.d_rate);
        self.global_a = ema_update(&self.global_a, &cur_a, d_rate)?;
        self.global_b = ema_update(&self.global_b, &cur_b, d_rate)?;
        self.iteration += 1;
        Ok(report)
    }

    /// Draws `k` patches from each dataset, stacked along the batch axis.
    fn sample_batches(&mut self, a: &[Tensor<T>], b: &[Tensor<T>], k: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut ia = Vec::with_capacity(k);
        let mut ib = Vec::with_capacity(k);
        for _ in 0..k {
            let (i, j) = sample_pair_indices(a.len(), b.len(), &mut self.rng)?;
            ia.push(&a[i]);
            ib.push(&b[j]);
        }
        Ok((Tensor::stack(&ia)?, Tensor::stack(&ib)?))
    }

    /// Trains until `num_epochs` epochs are complete, continuing from the
    /// current epoch. Each epoch has `min(|A|, |B|)` iterations with
    /// uniformly sampled patches.
    pub fn run(&mut self, a: &[Tensor<T>], b: &[Tensor<T>], hooks: &mut dyn TrainHooks<T>) -> Result<()> {
        if a.is_empty() || b.is_empty() {
            return Err(invalid_input!("both datasets must be non-empty"));
        }
        for data in [a, b] {
            let s = data[0].shape();
            if s[0] != 1 || data.iter().any(|t| t.shape() != s) {
                return Err(invalid_input!("dataset patches must share one [1, C, H, W] shape"));
            }
        }
        self.check_patch(&a[0])?;
        self.check_patch(&b[0])?;
        let per_epoch = a.len().min(b.len()) as u64;
        let k = self.config.patches_per_iteration;
        while !self.is_finished() {
            let lr = lr_schedule(self.epoch, &self.config)?;
            while self.epoch_iteration < per_epoch {
                let (pa, pb) = self.sample_batches(a, b, k)?;
                let losses = self.train_step_with_lr(&pa, &pb, lr)?;
                self.epoch_iteration += 1;
                hooks.on_step(&LogRecord { epoch: self.epoch, iteration: self.iteration, lr, losses })?;
            }
            self.epoch += 1;
            self.epoch_iteration = 0;
            hooks.on_epoch_end(self)?;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive<T> {
        let (seed, stream, word_pos) = (self.rng.get_seed(), self.rng.get_stream(), self.rng.get_word_pos());
        let meta = CheckpointMeta {
            config: self.config.clone(),
            epoch: self.epoch,
            epoch_iteration: self.epoch_iteration,
            iteration: self.iteration,
            rng_seed: seed,
            rng_stream: stream,
            rng_word_pos: word_pos.to_string(),
            adam_steps: self.opts.iter().map(Adam::steps).collect(),
        };
        let mut ar = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for ((net, params), opt) in NET_NAMES.iter().zip(self.param_sets()).zip(&self.opts) {
            for (name, t) in params.iter() {
                ar.push(format!("{net}/{name}"), t.clone());
            }
            let (m, v) = opt.moments();
            for ((name, _), (m, v)) in params.iter().zip(m.iter().zip(v)) {
                ar.push(format!("adam/{net}/m/{name}"), m.clone());
                ar.push(format!("adam/{net}/v/{name}"), v.clone());
            }
        }
        for (tag, st) in [("a", &self.global_a), ("b", &self.global_b)] {
            let (mu, sigma) = st.to_tensors();
            ar.push(format!("stats/{tag}/mu"), mu);
            ar.push(format!("stats/{tag}/sigma"), sigma);
        }
        ar
    }

    pub fn from_archive(ar: &Archive<T>) -> Result<Self> {
        if ar.kind != CHECKPOINT_KIND {
            return Err(Error::InvalidCheckpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ar.kind)));
        }
        let meta: CheckpointMeta = ar.meta_as()?;
        let mut s = Self::new(&meta.config).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        let load = |net: &str, params: &mut ParamSet<T>| {
            params
                .load_from(|name| ar.get(&format!("{net}/{name}")).cloned())
                .map_err(|e| Error::InvalidCheckpoint(format!("{net}: {e}")))
        };
        load(NET_NAMES[0], &mut s.enc_a.params)?;
        load(NET_NAMES[1], &mut s.enc_b.params)?;
        load(NET_NAMES[2], &mut s.dec_a.params)?;
        load(NET_NAMES[3], &mut s.dec_b.params)?;
        load(NET_NAMES[4], &mut s.disc_a.params)?;
        load(NET_NAMES[5], &mut s.disc_b.params)?;
        if meta.adam_steps.len() != NET_NAMES.len() {
            return Err(Error::InvalidCheckpoint("optimizer state for 6 networks expected".into()));
        }
        let sets: Vec<ParamSet<T>> = s.param_sets().iter().map(|p| (*p).clone()).collect();
        for (i, (opt, params)) in s.opts.iter_mut().zip(&sets).enumerate() {
            let net = NET_NAMES[i];
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, _) in params.iter() {
                m.push(ar.require(&format!("adam/{net}/m/{name}"))?.clone());
                v.push(ar.require(&format!("adam/{net}/v/{name}"))?.clone());
            }
            opt.restore(meta.adam_steps[i], m, v)
                .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        }
        let stats = |tag: &str| {
            ChannelStats::from_tensors(
                ar.require(&format!("stats/{tag}/mu"))?,
                ar.require(&format!("stats/{tag}/sigma"))?,
            )
            .map_err(|e| Error::InvalidCheckpoint(format!("global stats {tag}: {e}")))
        };
        s.global_a = stats("a")?;
        s.global_b = stats("b")?;
        for st in [&s.global_a, &s.global_b] {
            if st.channels() != meta.config.network.embedding_channels || !st.is_finite() {
                return Err(Error::InvalidCheckpoint("global stats do not match the embedding".into()));
            }
        }
        s.epoch = meta.epoch;
        s.epoch_iteration = meta.epoch_iteration;
        s.iteration = meta.iteration;
        let word_pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::InvalidCheckpoint("bad rng word position".into()))?;
        s.rng = ChaCha8Rng::from_seed(meta.rng_seed);
        s.rng.set_stream(meta.rng_stream);
        s.rng.set_word_pos(word_pos);
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Translates one image of domain `from` into the style of the other
    /// domain using its global statistics. Images larger than `tile.patch_size`
    /// are tiled and stitched; others are edge-padded to the encoder's
    /// spatial multiple and cropped back.
    pub fn translate_image(&self, image: &Tensor<T>, from: Domain, tile: &TileOptions) -> Result<Tensor<T>> {
        let to = from.other();
        let style = self.global_stats(to);
        if style.sigma().iter().all(|s| *s == T::zero()) {
            return Err(Error::InvalidCheckpoint(format!(
                "global statistics for domain {} were never estimated",
                to.tag()
            )));
        }
        let eps = T::lit(self.config.eps);
        let (enc, dec) = (self.encoder(from), self.decoder(to));
        map_tiled(
            image,
            tile.patch_size,
            tile.overlap,
            self.config.network.spatial_multiple(),
            |x| translate(x, enc, dec, style, eps),
        )
    }
}

/// Tiling used when translating large rasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileOptions {
    pub patch_size: usize,
    pub overlap: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            patch_size: crate::data_pipeline::DEFAULT_PATCH_SIZE,
            overlap: crate::data_pipeline::DEFAULT_OVERLAP,
        }
    }
}

/// Trains from scratch: [`TranslationState::new`] followed by
/// [`TranslationState::run`].
pub fn train<T: Scalar>(
    a: &[Tensor<T>],
    b: &[Tensor<T>],
    cfg: &TrainingConfig,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<TranslationState<T>> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid_input!("both datasets must be non-empty"));
    }
    let mut state = TranslationState::new(cfg)?;
    state.run(a, b, hooks)?;
    Ok(state)
}

/// Translates every image of domain `from` into the other domain's style.
/// Deterministic: repeated calls give bit-identical output.
pub fn generate_fake_dataset<T: Scalar>(
    state: &TranslationState<T>,
    images: &[Tensor<T>],
    from: Domain,
    tile: &TileOptions,
) -> Result<Vec<Tensor<T>>> {
    images.iter().map(|x| state.translate_image(x, from, tile)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            num_epochs: 2,
            decay_epoch: 1,
            network: NetworkConfig {
                base_channels: 4,
                embedding_channels: 16,
                num_res_blocks: 1,
                disc_base_channels: 4,
                disc_downsamples: 1,
                ..NetworkConfig::default()
            },
            ..TrainingConfig::default()
        }
    }

    fn patches<T: Scalar>(n: usize, size: usize, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn([1, 3, size, size], |_| T::lit(rng.random_range(-1.0..1.0))))
            .collect()
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainingConfig::default();
        let lr = |e| lr_schedule(e, &cfg).unwrap();
        assert_eq!(lr(0), 0.001);
        assert_eq!(lr(10), 0.001);
        assert_eq!(lr(15), 0.001);
        assert!((lr(20) - 0.0005).abs() < 1e-15);
        assert!((lr(24) - 0.0001).abs() < 1e-15);
        assert!(lr_schedule(25, &cfg).is_err());
        let all: Vec<f64> = (0..25).map(lr).collect();
        assert!(all.windows(2).all(|w| w[1] <= w[0]));
        let short = TrainingConfig { num_epochs: 1, ..Default::default() };
        assert!(short.validate().is_ok());
        assert_eq!(lr_schedule(0, &short).unwrap(), 0.001);
    }

    #[test]
    fn config_validation_and_toml() {
        assert!(TrainingConfig::default().validate().is_ok());
        for bad in [
            TrainingConfig { decay_epoch: 0, ..Default::default() },
            TrainingConfig { num_epochs: 0, ..Default::default() },
            TrainingConfig { d_rate: 1.0, ..Default::default() },
            TrainingConfig { patches_per_iteration: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        let text = toml::to_string(&tiny_cfg()).unwrap();
        assert_eq!(toml::from_str::<TrainingConfig>(&text).unwrap(), tiny_cfg());
        let partial: TrainingConfig = toml::from_str("num_epochs = 30\n[weights]\nlambda4 = 2.0\n").unwrap();
        assert_eq!(partial.num_epochs, 30);
        assert_eq!(partial.weights.lambda4, 2.0);
        assert_eq!(partial.weights.lambda1, 10.0);
        assert!(toml::from_str::<TrainingConfig>("bogus = 1").is_err());
    }

    #[test]
    fn zero_weights_and_rate_leave_parameters_bit_identical() {
        let cfg = TrainingConfig { base_lr: 0.0, weights: LossWeights::default().scaled(0.0), ..tiny_cfg() };
        let mut s = TranslationState::<f32>::new(&cfg).unwrap();
        let before: Vec<ParamSet<f32>> = s.param_sets().iter().map(|p| (*p).clone()).collect();
        let d = patches::<f32>(2, 8, 1);
        s.train_step(&d[0], &d[1]).unwrap();
        let after: Vec<ParamSet<f32>> = s.param_sets().iter().map(|p| (*p).clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn step_is_reproducible_and_updates_both_sides() {
        let d = patches::<f32>(2, 8, 2);
        let run = || {
            let mut s = TranslationState::<f32>::new(&tiny_cfg()).unwrap();
            let r = s.train_step(&d[0], &d[1]).unwrap();
            (r, s.to_archive().to_bytes())
        };
        let (r1, b1) = run();
        let (r2, b2) = run();
        assert_eq!(r1, r2);
        assert_eq!(b1, b2);
        assert!(r1.total_g.is_finite() && r1.total_d.is_finite());

        let fresh = TranslationState::<f32>::new(&tiny_cfg()).unwrap();
        let mut stepped = fresh.clone();
        stepped.train_step(&d[0], &d[1]).unwrap();
        for (x, y) in fresh.param_sets().iter().zip(stepped.param_sets()) {
            assert_ne!(*x, y);
        }
        assert_ne!(stepped.global_a, fresh.global_a);
        assert_ne!(stepped.global_b, fresh.global_b);
    }

    #[test]
    fn generator_and_discriminator_updates_are_separate() {
        // With only the adversarial term active and lambda4 = 0 the
        // discriminator sees zero gradient; generators still move through
        // reconstruction terms.
        let cfg = TrainingConfig {
            weights: LossWeights { lambda4: 0.0, ..LossWeights::default() },
            ..tiny_cfg()
        };
        let d = patches::<f64>(2, 8, 3);
        let mut s = TranslationState::<f64>::new(&cfg).unwrap();
        let disc_before = (s.disc_a.params.clone(), s.disc_b.params.clone());
        let enc_before = s.enc_a.params.clone();
        s.train_step(&d[0], &d[1]).unwrap();
        assert_eq!((s.disc_a.params.clone(), s.disc_b.params.clone()), disc_before);
        assert_ne!(s.enc_a.params, enc_before);

        let cfg = TrainingConfig { weights: LossWeights::default().scaled(0.0), ..tiny_cfg() };
        let mut s = TranslationState::<f64>::new(&cfg).unwrap();
        let gens_before: Vec<_> = s.param_sets()[..4].iter().map(|p| (*p).clone()).collect();
        s.train_step(&d[0], &d[1]).unwrap();
        let gens_after: Vec<_> = s.param_sets()[..4].iter().map(|p| (*p).clone()).collect();
        assert_eq!(gens_before, gens_after);
    }

    #[test]
    fn ema_tracks_current_embeddings() {
        let d = patches::<f64>(2, 8, 4);
        let mut s = TranslationState::<f64>::new(&tiny_cfg()).unwrap();
        let (ea, _) = s.enc_a.encode(&d[0]).unwrap();
        let cur = instance_stats(&ea).unwrap();
        s.train_step(&d[0], &d[1]).unwrap();
        for (g, c) in s.global_a.mu().iter().zip(cur.mu()) {
            assert!((g - 0.05 * c).abs() < 1e-12);
        }
        assert!(s.global_a.sigma().iter().all(|v| *v >= 0.0));
    }

    struct Counter {
        steps: usize,
        epochs: Vec<usize>,
    }

    impl TrainHooks<f32> for Counter {
        fn on_step(&mut self, r: &LogRecord) -> Result<()> {
            self.steps += 1;
            assert_eq!(r.iteration as usize, self.steps);
            Ok(())
        }
        fn on_epoch_end(&mut self, s: &TranslationState<f32>) -> Result<()> {
            self.epochs.push(s.epoch());
            Ok(())
        }
    }

    #[test]
    fn step_count_is_epochs_times_smaller_dataset() {
        let cfg = TrainingConfig {
            num_epochs: 25,
            decay_epoch: 15,
            network: NetworkConfig { num_res_blocks: 0, ..tiny_cfg().network },
            ..tiny_cfg()
        };
        let mut c = Counter { steps: 0, epochs: Vec::new() };
        let s = train(&patches::<f32>(10, 8, 5), &patches::<f32>(7, 8, 6), &cfg, &mut c).unwrap();
        assert_eq!(c.steps, 175);
        assert_eq!(s.iteration(), 175);
        assert_eq!(c.epochs, (1..=25).collect::<Vec<_>>());
        assert!(s.global_a.mu().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn empty_and_malformed_datasets() {
        let d = patches::<f32>(2, 8, 7);
        assert!(matches!(train(&[], &d, &tiny_cfg(), &mut NoHooks), Err(Error::InvalidInput(_))));
        let odd = patches::<f32>(1, 6, 8);
        assert!(train(&odd, &d, &tiny_cfg(), &mut NoHooks).is_err());
        let loud = vec![Tensor::<f32>::full([1, 3, 8, 8], 3.0)];
        assert!(train(&loud, &d, &tiny_cfg(), &mut NoHooks).is_err());
    }

    #[test]
    fn nan_is_reported_by_term() {
        let mut s = TranslationState::<f32>::new(&tiny_cfg()).unwrap();
        s.dec_b.params.tensors_mut()[0].data_mut()[0] = f32::NAN;
        let d = patches::<f32>(2, 8, 9);
        match s.train_step(&d[0], &d[1]) {
            Err(Error::Numerical(m)) => assert!(m.starts_with("cross"), "{m}"),
            other => panic!("expected a numerical error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let a = patches::<f32>(3, 8, 10);
        let b = patches::<f32>(3, 8, 11);
        let cfg = tiny_cfg();
        let full = train(&a, &b, &cfg, &mut NoHooks).unwrap();

        // Stop after the first epoch, reload, continue.
        struct StopAfterFirst;
        impl TrainHooks<f32> for StopAfterFirst {
            fn on_epoch_end(&mut self, _: &TranslationState<f32>) -> Result<()> {
                Err(Error::InvalidInput("stop".into()))
            }
        }
        let mut partial = TranslationState::<f32>::new(&cfg).unwrap();
        assert!(partial.run(&a, &b, &mut StopAfterFirst).is_err());
        assert_eq!(partial.epoch(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        partial.save(&p).unwrap();
        let mut resumed = TranslationState::<f32>::load(&p).unwrap();
        resumed.run(&a, &b, &mut NoHooks).unwrap();
        assert_eq!(resumed.to_archive().to_bytes(), full.to_archive().to_bytes());
    }

    #[test]
    fn fake_generation_is_deterministic_and_shape_preserving() {
        let cfg = tiny_cfg();
        let a = patches::<f32>(2, 8, 12);
        let s = train(&a, &patches::<f32>(2, 8, 13), &cfg, &mut NoHooks).unwrap();
        let big: Vec<Tensor<f32>> = vec![patches::<f32>(1, 8, 14)[0].clone(), {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            Tensor::from_fn([1, 3, 21, 13], |_| rng.random_range(-1.0..1.0))
        }];
        let tile = TileOptions { patch_size: 8, overlap: 2 };
        let f1 = generate_fake_dataset(&s, &big, Domain::A, &tile).unwrap();
        let f2 = generate_fake_dataset(&s, &big, Domain::A, &tile).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1[1].shape(), [1, 3, 21, 13]);
        // Small odd image goes through padding.
        let odd = Tensor::<f32>::zeros([1, 3, 5, 7]);
        assert_eq!(s.translate_image(&odd, Domain::B, &TileOptions::default()).unwrap().shape(), [1, 3, 5, 7]);
    }

    #[test]
    fn untrained_stats_are_an_invalid_checkpoint() {
        let s = TranslationState::<f32>::new(&tiny_cfg()).unwrap();
        let x = patches::<f32>(1, 8, 16);
        assert!(matches!(
            generate_fake_dataset(&s, &x, Domain::A, &TileOptions::default()),
            Err(Error::InvalidCheckpoint(_))
        ));
    }
}
