//! Encoders, decoders and patch discriminators, and the compositions that
//! turn them into the six generator paths.
//!
//! Layer stack (all convolutions zero-padded):
//!
//! * encoder: 7x7 stride-1 conv to `base_channels` (no normalization; its
//!   activation is the low-level skip), `num_downsamples` 3x3 stride-2 convs
//!   doubling channels, then `num_res_blocks` residual blocks. The last
//!   layer of the encoder is never normalized so the embedding keeps its
//!   per-channel statistics.
//! * decoder: `num_res_blocks` residual blocks, then `num_downsamples` 3x3
//!   stride-2 transposed convs halving channels, each fed the bilinearly
//!   resized low-level skip concatenated to its input, then a 7x7 conv to
//!   the image channels with `tanh`. The output conv also sees the skip, at
//!   full resolution; without it object boundaries come out soft.
//! * discriminator: `disc_downsamples` 4x4 stride-2 convs doubling channels
//!   from `disc_base_channels`, one 4x4 stride-1 conv, then a 4x4 stride-1
//!   conv to a single raw score channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::core_math::ChannelStats;
use crate::error::{invalid_input, Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const DISC_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Instance,
}

/// Architecture hyperparameters shared by the four generator networks and
/// the two discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_downsamples: usize,
    pub embedding_channels: usize,
    pub num_res_blocks: usize,
    /// Leaky activation slope in the generators.
    pub negative_slope: f64,
    /// Normalization of every intermediate generator stage.
    pub norm_kind: NormKind,
    pub disc_base_channels: usize,
    pub disc_downsamples: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            base_channels: 64,
            num_downsamples: 2,
            embedding_channels: 256,
            num_res_blocks: 2,
            negative_slope: 0.2,
            norm_kind: NormKind::Instance,
            disc_base_channels: 64,
            disc_downsamples: 3,
        }
    }
}

impl NetworkConfig {
    /// A narrow configuration for desk-scale experiments.
    pub fn small() -> Self {
        NetworkConfig {
            base_channels: 8,
            embedding_channels: 32,
            disc_base_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_downsamples < 1 {
            return bad("num_downsamples must be >= 1".into());
        }
        if self.base_channels < 4 {
            return bad(format!("base_channels must be >= 4, got {}", self.base_channels));
        }
        let expected = self.base_channels << self.num_downsamples;
        if self.embedding_channels != expected {
            return bad(format!(
                "embedding_channels must equal base_channels * 2^num_downsamples = {expected}, got {}",
                self.embedding_channels
            ));
        }
        if self.disc_base_channels == 0 {
            return bad("disc_base_channels must be positive".into());
        }
        if !(self.negative_slope >= 0.0 && self.negative_slope < 1.0) {
            return bad(format!("negative_slope must be in [0, 1), got {}", self.negative_slope));
        }
        Ok(())
    }

    /// Spatial divisor the encoder requires of its input.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.num_downsamples
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl Conv {
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        Conv {
            w: ps.gaussian(format!("{name}.weight"), [cout, cin, k, k], INIT_STD, rng),
            b: ps.zeros(format!("{name}.bias"), [1, cout, 1, 1]),
            geom,
        }
    }

    /// Transposed-conv weights are `[Cin, Cout, K, K]`.
    fn new_transposed<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        Conv {
            w: ps.gaussian(format!("{name}.weight"), [cin, cout, k, k], INIT_STD, rng),
            b: ps.zeros(format!("{name}.bias"), [1, cout, 1, 1]),
            geom,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.geom)
    }

    fn forward_transposed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, p.var(self.w), Some(p.var(self.b)), self.geom, 1)
    }
}

fn norm<T: Scalar>(g: &mut Graph<T>, kind: NormKind, x: Var) -> Var {
    match kind {
        NormKind::None => x,
        NormKind::Instance => g.instance_norm(x, T::lit(NORM_EPS)),
    }
}

/// Which domain a network belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::A => "a",
            Domain::B => "b",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(invalid_input!("unknown domain {other:?}, expected A or B")),
        }
    }
}

/// Image-to-embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    cfg: NetworkConfig,
    pub params: ParamSet<T>,
    conv_in: Conv,
    downs: Vec<Conv>,
    res: Vec<(Conv, Conv)>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let conv_in = Conv::new(&mut ps, "conv_in", cfg.in_channels, cfg.base_channels, ConvGeom::new(7, 1, 3), rng);
        let mut ch = cfg.base_channels;
        let mut downs = Vec::new();
        for i in 0..cfg.num_downsamples {
            downs.push(Conv::new(&mut ps, &format!("down{i}"), ch, ch * 2, ConvGeom::new(3, 2, 1), rng));
            ch *= 2;
        }
        let res = (0..cfg.num_res_blocks)
            .map(|i| {
                (
                    Conv::new(&mut ps, &format!("res{i}.conv0"), ch, ch, ConvGeom::new(3, 1, 1), rng),
                    Conv::new(&mut ps, &format!("res{i}.conv1"), ch, ch, ConvGeom::new(3, 1, 1), rng),
                )
            })
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            params: ps,
            conv_in,
            downs,
            res,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let m = self.cfg.spatial_multiple();
        if shape[1] != self.cfg.in_channels {
            return Err(invalid_input!(
                "encoder expects {} channels, got {}",
                self.cfg.in_channels,
                shape[1]
            ));
        }
        if shape[2] == 0 || shape[3] == 0 || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(invalid_input!(
                "image {}x{} is not divisible by {m}; pad it first",
                shape[2],
                shape[3]
            ));
        }
        Ok(())
    }

    /// Returns `(embedding, low_level)` nodes.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> (Var, Var) {
        let slope = T::lit(self.cfg.negative_slope);
        let h = self.conv_in.forward(g, p, x);
        let low = g.leaky_relu(h, slope);
        let mut h = low;
        let last_down = self.downs.len() - 1;
        for (i, conv) in self.downs.iter().enumerate() {
            let y = conv.forward(g, p, h);
            let y = if i == last_down && self.res.is_empty() {
                y
            } else {
                norm(g, self.cfg.norm_kind, y)
            };
            h = g.leaky_relu(y, slope);
        }
        let last_res = self.res.len().saturating_sub(1);
        for (i, (c0, c1)) in self.res.iter().enumerate() {
            let t = c0.forward(g, p, h);
            let t = norm(g, self.cfg.norm_kind, t);
            let t = g.leaky_relu(t, slope);
            let t = c1.forward(g, p, t);
            let t = if i == last_res { t } else { norm(g, self.cfg.norm_kind, t) };
            h = g.add(h, t);
        }
        (h, low)
    }

    /// Plain-tensor encode: `(embedding, low_level)`.
    pub fn encode(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(image.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (e, l) = self.forward(&mut g, &p, x);
        Ok((g.value(e).clone(), g.value(l).clone()))
    }
}

/// Embedding-to-image network with low-level skip inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    cfg: NetworkConfig,
    pub params: ParamSet<T>,
    res: Vec<(Conv, Conv)>,
    ups: Vec<Conv>,
    conv_out: Conv,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut ch = cfg.embedding_channels;
        let res = (0..cfg.num_res_blocks)
            .map(|i| {
                (
                    Conv::new(&mut ps, &format!("res{i}.conv0"), ch, ch, ConvGeom::new(3, 1, 1), rng),
                    Conv::new(&mut ps, &format!("res{i}.conv1"), ch, ch, ConvGeom::new(3, 1, 1), rng),
                )
            })
            .collect();
        let mut ups = Vec::new();
        for i in 0..cfg.num_downsamples {
            ups.push(Conv::new_transposed(
                &mut ps,
                &format!("up{i}"),
                ch + cfg.base_channels,
                ch / 2,
                ConvGeom::new(3, 2, 1),
                rng,
            ));
            ch /= 2;
        }
        let conv_out = Conv::new(&mut ps, "conv_out", ch + cfg.base_channels, cfg.in_channels, ConvGeom::new(7, 1, 3), rng);
        Ok(Decoder {
            cfg: cfg.clone(),
            params: ps,
            res,
            ups,
            conv_out,
        })
    }

    pub fn check_inputs(&self, emb: [usize; 4], low: [usize; 4]) -> Result<()> {
        let m = self.cfg.spatial_multiple();
        if emb[1] != self.cfg.embedding_channels {
            return Err(invalid_input!(
                "decoder expects {} embedding channels, got {}",
                self.cfg.embedding_channels,
                emb[1]
            ));
        }
        if low[1] != self.cfg.base_channels || low[0] != emb[0] {
            return Err(invalid_input!("low-level features {low:?} do not match embedding {emb:?}"));
        }
        if low[2] != emb[2] * m || low[3] != emb[3] * m {
            return Err(invalid_input!(
                "low-level features {}x{} are not {m}x the embedding {}x{}",
                low[2],
                low[3],
                emb[2],
                emb[3]
            ));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, emb: Var, low: Var) -> Var {
        let slope = T::lit(self.cfg.negative_slope);
        let mut h = emb;
        for (c0, c1) in &self.res {
            let t = c0.forward(g, p, h);
            let t = norm(g, self.cfg.norm_kind, t);
            let t = g.leaky_relu(t, slope);
            let t = c1.forward(g, p, t);
            let t = norm(g, self.cfg.norm_kind, t);
            h = g.add(h, t);
        }
        for up in &self.ups {
            let [_, _, hh, ww] = g.shape(h);
            let skip = g.resize_bilinear(low, hh, ww);
            let cat = g.concat(h, skip);
            let y = up.forward_transposed(g, p, cat);
            let y = norm(g, self.cfg.norm_kind, y);
            h = g.leaky_relu(y, slope);
        }
        let h = g.concat(h, low);
        let y = self.conv_out.forward(g, p, h);
        g.tanh(y)
    }

    pub fn decode(&self, emb: &Tensor<T>, low: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(emb.shape(), low.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let e = g.constant(emb.clone());
        let l = g.constant(low.clone());
        let y = self.forward(&mut g, &p, e, l);
        Ok(g.value(y).clone())
    }
}

/// Patch discriminator producing a raw (unbounded) realness map.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub params: ParamSet<T>,
    layers: Vec<(Conv, bool)>,
    head: Conv,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut layers = Vec::new();
        let mut cin = cfg.in_channels;
        let mut ch = cfg.disc_base_channels;
        for i in 0..cfg.disc_downsamples {
            let c = Conv::new(&mut ps, &format!("conv{i}"), cin, ch, ConvGeom::new(4, 2, 1), rng);
            layers.push((c, i > 0));
            cin = ch;
            ch *= 2;
        }
        let c = Conv::new(&mut ps, &format!("conv{}", cfg.disc_downsamples), cin, ch, ConvGeom::new(4, 1, 1), rng);
        layers.push((c, cfg.disc_downsamples > 0));
        let head = Conv::new(&mut ps, "head", ch, 1, ConvGeom::new(4, 1, 1), rng);
        Ok(Discriminator {
            params: ps,
            layers,
            head,
        })
    }

    /// Spatial size of the score map for an `h x w` input, or an error
    /// if the input is too small for the layer stack.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for (c, _) in self.layers.iter().chain(std::iter::once(&(self.head, false))) {
            match (c.geom.out_len(h), c.geom.out_len(w)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (h, w) = (a, b),
                _ => return Err(invalid_input!("image too small for the discriminator")),
            }
        }
        Ok((h, w))
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let slope = T::lit(DISC_SLOPE);
        let mut h = x;
        for (c, normed) in &self.layers {
            let y = c.forward(g, p, h);
            let y = if *normed { g.instance_norm(y, T::lit(NORM_EPS)) } else { y };
            h = g.leaky_relu(y, slope);
        }
        self.head.forward(g, p, h)
    }

    pub fn discriminate(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_size(image.height(), image.width())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &p, x);
        Ok(g.value(y).clone())
    }
}

/// Encodes with `src`, re-styles the embedding with `style`, decodes with
/// `tgt`. Low-level skips come from the content encoder.
pub fn translate<T: Scalar>(
    content: &Tensor<T>,
    src: &Encoder<T>,
    tgt: &Decoder<T>,
    style: &ChannelStats<T>,
    eps: T,
) -> Result<Tensor<T>> {
    src.check_input(content.shape())?;
    if style.channels() != src.config().embedding_channels {
        return Err(invalid_input!(
            "style has {} channels, embedding has {}",
            style.channels(),
            src.config().embedding_channels
        ));
    }
    let mut g = Graph::new();
    let pe = src.params.bind(&mut g, false);
    let pd = tgt.params.bind(&mut g, false);
    let x = g.constant(content.clone());
    let (emb, low) = src.forward(&mut g, &pe, x);
    let (mu, sigma) = style.to_tensors();
    let mu = g.constant(mu);
    let sigma = g.constant(sigma);
    let styled = g.adain(emb, mu, sigma, eps);
    let y = tgt.forward(&mut g, &pd, styled, low);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::instance_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| T::lit(r.random_range(-1.0..1.0)))
    }

    // Layer arithmetic, written out independently of the constructors.
    fn expected_param_counts(cfg: &NetworkConfig) -> (usize, usize, usize) {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let (b, e) = (cfg.base_channels, cfg.embedding_channels);
        let res = cfg.num_res_blocks * 2 * conv(e, e, 3);
        let mut enc = conv(cfg.in_channels, b, 7) + res;
        let mut dec = res + conv(2 * b, cfg.in_channels, 7);
        let mut ch = b;
        for _ in 0..cfg.num_downsamples {
            enc += conv(ch, 2 * ch, 3);
            ch *= 2;
        }
        for _ in 0..cfg.num_downsamples {
            dec += conv(ch + b, ch / 2, 3);
            ch /= 2;
        }
        let mut disc = 0;
        let (mut cin, mut c) = (cfg.in_channels, cfg.disc_base_channels);
        for _ in 0..cfg.disc_downsamples {
            disc += conv(cin, c, 4);
            cin = c;
            c *= 2;
        }
        disc += conv(cin, c, 4) + conv(c, 1, 4);
        (enc, dec, disc)
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig::small().validate().is_ok());
        assert!(NetworkConfig { base_channels: 4, embedding_channels: 16, ..Default::default() }.validate().is_ok());
        let bad = [
            NetworkConfig { num_downsamples: 0, embedding_channels: 64, ..Default::default() },
            NetworkConfig { base_channels: 2, embedding_channels: 8, ..Default::default() },
            NetworkConfig { embedding_channels: 200, ..Default::default() },
            NetworkConfig { negative_slope: -0.1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn parameter_counts_follow_config() {
        for cfg in [NetworkConfig::default(), NetworkConfig::small()] {
            let (e, d, s) = expected_param_counts(&cfg);
            let mut r = rng(0);
            assert_eq!(Encoder::<f32>::new(&cfg, &mut r).unwrap().params.num_scalars(), e);
            assert_eq!(Decoder::<f32>::new(&cfg, &mut r).unwrap().params.num_scalars(), d);
            assert_eq!(Discriminator::<f32>::new(&cfg, &mut r).unwrap().params.num_scalars(), s);
        }
        // Frozen values for the full-width default stack.
        assert_eq!(expected_param_counts(&NetworkConfig::default()), (2_738_816, 2_858_563, 2_764_737));
    }

    #[test]
    fn full_size_shapes() {
        let cfg = NetworkConfig { num_res_blocks: 0, ..Default::default() };
        let mut r = rng(1);
        let enc = Encoder::<f32>::new(&cfg, &mut r).unwrap();
        let dec = Decoder::<f32>::new(&cfg, &mut r).unwrap();
        let x = image::<f32>([1, 3, 256, 256], 2);
        let (emb, low) = enc.encode(&x).unwrap();
        assert_eq!(emb.shape(), [1, 256, 64, 64]);
        assert_eq!(low.shape(), [1, 64, 256, 256]);
        let y = dec.decode(&emb, &low).unwrap();
        assert_eq!(y.shape(), [1, 3, 256, 256]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_map_is_30x30_for_256_input() {
        let cfg = NetworkConfig { disc_base_channels: 4, ..NetworkConfig::small() };
        let d = Discriminator::<f32>::new(&cfg, &mut rng(3)).unwrap();
        assert_eq!(d.output_size(256, 256).unwrap(), (30, 30));
        let out = d.discriminate(&image([1, 3, 256, 256], 4)).unwrap();
        assert_eq!(out.shape(), [1, 1, 30, 30]);
        assert_eq!(out, d.discriminate(&image([1, 3, 256, 256], 4)).unwrap());
    }

    #[test]
    fn encode_rejects_indivisible_input() {
        let enc = Encoder::<f32>::new(&NetworkConfig::small(), &mut rng(5)).unwrap();
        assert!(matches!(enc.encode(&Tensor::zeros([1, 3, 30, 32])), Err(Error::InvalidInput(_))));
        assert!(matches!(enc.encode(&Tensor::zeros([1, 1, 32, 32])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn forward_passes_are_deterministic_and_nondegenerate() {
        let cfg = NetworkConfig::small();
        let mut r = rng(6);
        let enc = Encoder::<f32>::new(&cfg, &mut r).unwrap();
        let dec = Decoder::<f32>::new(&cfg, &mut r).unwrap();
        let x = image::<f32>([1, 3, 32, 32], 7);
        let (e1, l1) = enc.encode(&x).unwrap();
        let (e2, l2) = enc.encode(&x).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(l1, l2);
        assert!(e1.all_finite());
        let stats = instance_stats(&e1).unwrap();
        assert!(stats.sigma().iter().all(|&s| s > 0.0));
        let y1 = dec.decode(&e1, &l1).unwrap();
        assert_eq!(y1, dec.decode(&e1, &l1).unwrap());
        assert_eq!(y1.shape(), x.shape());
    }

    #[test]
    fn decode_rejects_mismatched_skip() {
        let cfg = NetworkConfig::small();
        let dec = Decoder::<f32>::new(&cfg, &mut rng(8)).unwrap();
        let emb = Tensor::zeros([1, 32, 8, 8]);
        assert!(dec.decode(&emb, &Tensor::zeros([1, 8, 16, 16])).is_err());
        assert!(dec.decode(&emb, &Tensor::zeros([1, 4, 32, 32])).is_err());
        assert!(dec.decode(&Tensor::zeros([1, 16, 8, 8]), &Tensor::zeros([1, 8, 32, 32])).is_err());
    }

    #[test]
    fn translate_with_own_style_is_self_path() {
        let cfg = NetworkConfig::small();
        let mut r = rng(9);
        let enc = Encoder::<f64>::new(&cfg, &mut r).unwrap();
        let dec = Decoder::<f64>::new(&cfg, &mut r).unwrap();
        let x = image::<f64>([1, 3, 16, 16], 10);
        let (emb, low) = enc.encode(&x).unwrap();
        let own = instance_stats(&emb).unwrap();
        let via_translate = translate(&x, &enc, &dec, &own, 1e-5).unwrap();
        let self_path = dec.decode(&emb, &low).unwrap();
        assert!(via_translate.max_abs_diff(&self_path) < 1e-4);
        assert_eq!(via_translate, translate(&x, &enc, &dec, &own, 1e-5).unwrap());
    }

    #[test]
    fn translate_rejects_wrong_style_width() {
        let cfg = NetworkConfig::small();
        let mut r = rng(11);
        let enc = Encoder::<f32>::new(&cfg, &mut r).unwrap();
        let dec = Decoder::<f32>::new(&cfg, &mut r).unwrap();
        let x = Tensor::zeros([1, 3, 16, 16]);
        assert!(translate(&x, &enc, &dec, &ChannelStats::zeros(3), 1e-5).is_err());
    }

    #[test]
    fn decoder_parameter_gradients_match_finite_differences() {
        let cfg = NetworkConfig { num_res_blocks: 1, ..NetworkConfig::small() };
        let mut r = rng(12);
        // Larger init so the toy net is far from the flat tanh/IN regime.
        let mut dec = Decoder::<f64>::new(&cfg, &mut r).unwrap();
        for t in dec.params.tensors_mut() {
            *t = t.map(|v| v * 10.0);
        }
        let emb = image::<f64>([1, 32, 4, 4], 13);
        let low = image::<f64>([1, 8, 16, 16], 14);
        let target = image::<f64>([1, 3, 16, 16], 15);
        let loss = |dec: &Decoder<f64>| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let p = dec.params.bind(&mut g, true);
            let e = g.constant(emb.clone());
            let l = g.constant(low.clone());
            let y = dec.forward(&mut g, &p, e, l);
            let t = g.constant(target.clone());
            let d = g.sub(y, t);
            let out = g.mean_sq_to(d, 0.0);
            let mut grads = g.backward(out);
            (g.scalar(out), p.gradients(&mut grads, &dec.params))
        };
        let (_, analytic) = loss(&dec);
        let h = 1e-6;
        let mut checked = 0;
        let mut ok = 0;
        for (pi, grad) in analytic.iter().enumerate() {
            for idx in (0..grad.numel()).step_by(grad.numel() / 5 + 1) {
                let mut plus = dec.clone();
                plus.params.tensors_mut()[pi].data_mut()[idx] += h;
                let mut minus = dec.clone();
                minus.params.tensors_mut()[pi].data_mut()[idx] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let a = grad.data()[idx];
                // Biases feeding instance norm have exactly zero gradient; the floor
                // keeps finite-difference noise there from counting as error.
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                checked += 1;
                if rel < 1e-3 {
                    ok += 1;
                }
            }
        }
        assert_eq!(ok, checked, "{ok}/{checked} coordinates within 1e-3");
    }

    #[test]
    fn discriminator_input_gradient_is_finite() {
        let cfg = NetworkConfig::small();
        let d = Discriminator::<f64>::new(&cfg, &mut rng(16)).unwrap();
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, false);
        let x = g.leaf(image([1, 3, 32, 32], 17));
        let y = d.forward(&mut g, &p, x);
        let l = g.mean_sq_to(y, 1.0);
        let grads = g.backward(l);
        let gx = grads.get(x).unwrap();
        assert!(gx.all_finite());
        assert!(gx.data().iter().any(|&v| v != 0.0));
    }
}
