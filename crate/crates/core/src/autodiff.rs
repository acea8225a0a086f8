//! A tape-based reverse-mode autodiff graph over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append
//! nodes; [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of a scalar node with respect to every node that requires
//! them.

use crate::core_math::{sobel_backward, sobel_gradients};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Tanh(Var),
    Concat(Var, Var),
    Resize(Var),
    PadReplicate(Var, usize),
    MaxPool(Var, Vec<u32>),
    /// `(x - mean) / (std + eps)` over groups of one channel, either per
    /// sample or pooled across the batch.
    Normalize {
        x: Var,
        per_sample: bool,
        inv: Vec<T>,
        std: Vec<T>,
    },
    /// `x * scale + shift` with `[1, C, 1, 1]` scale/shift.
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelMean(Var),
    ChannelStd(Var),
    Sobel(Var),
    MeanAbsDiff(Var, Var),
    MeanSqToConst(Var, T),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is not tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is tracked (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1, 1, 1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_pad: usize,
    ) -> Var {
        let value = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
            out_pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::ConvTranspose { x, w, b, geom }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add: shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub: shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Sum of several same-shaped nodes.
    pub fn sum_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = ta.shape();
        let [nb, cb, hb, wb] = tb.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: spatial/batch mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(ta.sample_slice(i));
            data.extend_from_slice(tb.sample_slice(i));
        }
        let value = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat sizes");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat(a, b), rg)
    }

    pub fn resize_bilinear(&mut self, a: Var, h: usize, w: usize) -> Var {
        let value = kernels::resize_bilinear(self.value(a), h, w);
        let rg = self.rg(a);
        self.push(value, Op::Resize(a), rg)
    }

    /// Pads `p` pixels on every side by repeating the border.
    pub fn pad_replicate(&mut self, a: Var, p: usize) -> Var {
        if p == 0 {
            return a;
        }
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let value = Tensor::from_fn([n, c, h + 2 * p, w + 2 * p], |[i, ch, y, x]| {
            t.at([i, ch, y.saturating_sub(p).min(h - 1), x.saturating_sub(p).min(w - 1)])
        });
        let rg = self.rg(a);
        self.push(value, Op::PadReplicate(a, p), rg)
    }

    pub fn max_pool2(&mut self, a: Var) -> Var {
        let (value, arg) = kernels::max_pool2(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::MaxPool(a, arg), rg)
    }

    fn normalize_impl(&mut self, x: Var, per_sample: bool, eps: T) -> Var {
        let t = self.value(x);
        let [n, c, _, _] = t.shape();
        let groups = if per_sample { n * c } else { c };
        let mut mean = vec![T::zero(); groups];
        let mut count = vec![0usize; groups];
        let gid = |i: usize, ch: usize| if per_sample { i * c + ch } else { ch };
        for i in 0..n {
            for ch in 0..c {
                let p = t.plane_slice(i, ch);
                mean[gid(i, ch)] += p.iter().copied().sum::<T>();
                count[gid(i, ch)] += p.len();
            }
        }
        for (m, &k) in mean.iter_mut().zip(&count) {
            *m /= T::from_usize_lossy(k);
        }
        let mut var = vec![T::zero(); groups];
        for i in 0..n {
            for ch in 0..c {
                let m = mean[gid(i, ch)];
                var[gid(i, ch)] += t
                    .plane_slice(i, ch)
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
        }
        let std: Vec<T> = var
            .iter()
            .zip(&count)
            .map(|(&v, &k)| (v / T::from_usize_lossy(k)).sqrt())
            .collect();
        let inv: Vec<T> = std.iter().map(|&s| T::one() / (s + eps)).collect();
        let mut value = t.clone();
        for i in 0..n {
            for ch in 0..c {
                let g = gid(i, ch);
                let (m, k) = (mean[g], inv[g]);
                value
                    .plane_slice_mut(i, ch)
                    .iter_mut()
                    .for_each(|v| *v = (*v - m) * k);
            }
        }
        let rg = self.rg(x);
        self.push(
            value,
            Op::Normalize {
                x,
                per_sample,
                inv,
                std,
            },
            rg,
        )
    }

    /// Instance normalization (per sample, per channel), without affine
    /// parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        self.normalize_impl(x, true, eps)
    }

    /// Normalization with statistics pooled over batch and space, the
    /// content half of adaptive instance normalization.
    pub fn normalize_pooled(&mut self, x: Var, eps: T) -> Var {
        self.normalize_impl(x, false, eps)
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (s, b) = (self.value(scale), self.value(shift));
        let c = self.value(x).channels();
        assert_eq!(s.shape(), [1, c, 1, 1], "channel_affine scale shape");
        assert_eq!(b.shape(), [1, c, 1, 1], "channel_affine shift shape");
        let (s, b) = (s.data().to_vec(), b.data().to_vec());
        let mut value = self.value(x).clone();
        for i in 0..value.batch() {
            for ch in 0..c {
                let (k, o) = (s[ch], b[ch]);
                value
                    .plane_slice_mut(i, ch)
                    .iter_mut()
                    .for_each(|v| *v = *v * k + o);
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(value, Op::ChannelAffine { x, scale, shift }, rg)
    }

    /// Adaptive instance normalization with target statistics given as
    /// `[1, C, 1, 1]` nodes.
    pub fn adain(&mut self, x: Var, mu: Var, sigma: Var, eps: T) -> Var {
        let n = self.normalize_pooled(x, eps);
        self.channel_affine(n, sigma, mu)
    }

    /// Per-channel mean pooled over batch and space, as `[1, C, 1, 1]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let k = T::from_usize_lossy(n * h * w);
        let data = (0..c)
            .map(|ch| {
                (0..n)
                    .map(|i| t.plane_slice(i, ch).iter().copied().sum::<T>())
                    .sum::<T>()
                    / k
            })
            .collect();
        let value = Tensor::from_vec([1, c, 1, 1], data).expect("channel vector");
        let rg = self.rg(x);
        self.push(value, Op::ChannelMean(x), rg)
    }

    /// Per-channel population standard deviation, as `[1, C, 1, 1]`.
    pub fn channel_std(&mut self, x: Var) -> Var {
        let stats = crate::core_math::instance_stats(self.value(x)).expect("non-empty tensor");
        let c = stats.channels();
        let value = Tensor::from_vec([1, c, 1, 1], stats.sigma().to_vec()).expect("channel vector");
        let rg = self.rg(x);
        self.push(value, Op::ChannelStd(x), rg)
    }

    /// Sobel gradients stacked along channels: `[gx; gy]`, `2C` channels.
    pub fn sobel(&mut self, x: Var) -> Var {
        let (gx, gy) = sobel_gradients(self.value(x)).expect("sobel input too small");
        let [n, c, h, w] = gx.shape();
        let mut data = Vec::with_capacity(2 * gx.numel());
        for i in 0..n {
            data.extend_from_slice(gx.sample_slice(i));
            data.extend_from_slice(gy.sample_slice(i));
        }
        let value = Tensor::from_vec([n, 2 * c, h, w], data).expect("sobel sizes");
        let rg = self.rg(x);
        self.push(value, Op::Sobel(x), rg)
    }

    /// `mean(|a - b|)` as a scalar node.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mean_abs_diff: shape mismatch");
        let s: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let value = Tensor::scalar(s / T::from_usize_lossy(ta.numel()));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MeanAbsDiff(a, b), rg)
    }

    /// `mean((a - target)^2)` as a scalar node.
    pub fn mean_sq_to(&mut self, a: Var, target: T) -> Var {
        let ta = self.value(a);
        let s: T = ta
            .data()
            .iter()
            .map(|&x| (x - target) * (x - target))
            .sum();
        let value = Tensor::scalar(s / T::from_usize_lossy(ta.numel()));
        let rg = self.rg(a);
        self.push(value, Op::MeanSqToConst(a, target), rg)
    }

    /// Mean pixelwise softmax cross-entropy. `labels` holds one class id per
    /// pixel in `[N, H, W]` order.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<u8>) -> Var {
        let t = self.value(logits);
        let [n, c, h, w] = t.shape();
        assert_eq!(labels.len(), n * h * w, "cross_entropy: label count");
        let plane = h * w;
        let mut probs = vec![T::zero(); t.numel()];
        let mut loss = T::zero();
        for i in 0..n {
            let s = t.sample_slice(i);
            let ps = &mut probs[i * c * plane..(i + 1) * c * plane];
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(s[ch * plane + p]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (s[ch * plane + p] - mx).exp();
                    ps[ch * plane + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    ps[ch * plane + p] /= z;
                }
                let y = labels[i * plane + p] as usize;
                assert!(y < c, "cross_entropy: label {y} out of range");
                loss -= ps[y * plane + p].max(T::min_positive_value()).ln();
            }
        }
        let value = Tensor::scalar(loss / T::from_usize_lossy(n * plane));
        let rg = self.rg(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            rg,
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), [1, 1, 1, 1], "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Input => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, gy.map(|v| v * k));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let g = gy
                    .zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { g * slope })
                    .expect("same shape");
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = gy
                    .zip_map(&node.value, |g, y| g * (T::one() - y * y))
                    .expect("same shape");
                self.accumulate(grads, *a, g);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels();
                let [n, c, h, w] = gy.shape();
                let split = ca * h * w;
                let mut ga = Vec::with_capacity(n * split);
                let mut gb = Vec::with_capacity(n * (c - ca) * h * w);
                for i in 0..n {
                    let s = gy.sample_slice(i);
                    ga.extend_from_slice(&s[..split]);
                    gb.extend_from_slice(&s[split..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec([n, ca, h, w], ga).expect("split"));
                self.accumulate(
                    grads,
                    *b,
                    Tensor::from_vec([n, c - ca, h, w], gb).expect("split"),
                );
            }
            Op::Resize(a) => {
                let [_, _, h, w] = self.shape(*a);
                self.accumulate(grads, *a, kernels::resize_bilinear_backward(gy, h, w));
            }
            Op::PadReplicate(a, p) => {
                let [n, c, h, w] = self.shape(*a);
                let mut g = Tensor::zeros([n, c, h, w]);
                let [_, _, ph, pw] = gy.shape();
                for i in 0..n {
                    for ch in 0..c {
                        let src = gy.plane_slice(i, ch);
                        let dst = g.plane_slice_mut(i, ch);
                        for y in 0..ph {
                            let yy = y.saturating_sub(*p).min(h - 1);
                            for x in 0..pw {
                                dst[yy * w + x.saturating_sub(*p).min(w - 1)] += src[y * pw + x];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::MaxPool(a, arg) => {
                let g = kernels::max_pool2_backward(gy, arg, self.shape(*a));
                self.accumulate(grads, *a, g);
            }
            Op::Normalize {
                x,
                per_sample,
                inv,
                std,
            } => {
                if !self.rg(*x) {
                    return;
                }
                let y = &node.value;
                let [n, c, _, _] = y.shape();
                let gid = |i: usize, ch: usize| if *per_sample { i * c + ch } else { ch };
                let groups = inv.len();
                // Per group: mean(g) and mean(g * y).
                let mut sum_g = vec![T::zero(); groups];
                let mut sum_gy = vec![T::zero(); groups];
                let mut count = vec![0usize; groups];
                for i in 0..n {
                    for ch in 0..c {
                        let k = gid(i, ch);
                        let (gs, ys) = (gy.plane_slice(i, ch), y.plane_slice(i, ch));
                        for (&g, &v) in gs.iter().zip(ys) {
                            sum_g[k] += g;
                            sum_gy[k] += g * v;
                        }
                        count[k] += gs.len();
                    }
                }
                // y = (x - m) / (s + eps), s the population std:
                // dx = (g - mean(g)) / (s + eps) - y * sum(g * y) / (n * s).
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let k = gid(i, ch);
                        let cnt = T::from_usize_lossy(count[k]);
                        let mg = sum_g[k] / cnt;
                        let coeff = if std[k] > T::zero() {
                            sum_gy[k] / (cnt * std[k])
                        } else {
                            T::zero()
                        };
                        let ik = inv[k];
                        let (gs, ys) = (gy.plane_slice(i, ch), y.plane_slice(i, ch));
                        let out = dx.plane_slice_mut(i, ch);
                        for ((o, &g), &v) in out.iter_mut().zip(gs).zip(ys) {
                            *o = ik * (g - mg) - coeff * v;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x);
                let [n, c, _, _] = xv.shape();
                let s = self.value(*scale).data();
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    for i in 0..n {
                        for ch in 0..c {
                            let k = s[ch];
                            dx.plane_slice_mut(i, ch).iter_mut().for_each(|v| *v *= k);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*scale) || self.rg(*shift) {
                    let mut ds = Tensor::zeros([1, c, 1, 1]);
                    let mut db = Tensor::zeros([1, c, 1, 1]);
                    for i in 0..n {
                        for ch in 0..c {
                            let (gs, xs) = (gy.plane_slice(i, ch), xv.plane_slice(i, ch));
                            ds.data_mut()[ch] += gs.iter().zip(xs).map(|(&g, &v)| g * v).sum::<T>();
                            db.data_mut()[ch] += gs.iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *scale, ds);
                    self.accumulate(grads, *shift, db);
                }
            }
            Op::ChannelMean(x) => {
                let shape = self.shape(*x);
                let [n, _, h, w] = shape;
                let k = T::from_usize_lossy(n * h * w);
                let g = Tensor::from_fn(shape, |[_, ch, _, _]| gy.data()[ch] / k);
                self.accumulate(grads, *x, g);
            }
            Op::ChannelStd(x) => {
                let xv = self.value(*x);
                let [n, _, h, w] = xv.shape();
                let k = T::from_usize_lossy(n * h * w);
                let stats = crate::core_math::instance_stats(xv).expect("non-empty");
                let g = Tensor::from_fn(xv.shape(), |idx| {
                    let ch = idx[1];
                    let s = stats.sigma()[ch];
                    if s > T::zero() {
                        gy.data()[ch] * (xv.at(idx) - stats.mu()[ch]) / (k * s)
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Sobel(x) => {
                let [n, c2, h, w] = gy.shape();
                let c = c2 / 2;
                let split = c * h * w;
                let mut gx = Vec::with_capacity(n * split);
                let mut gyy = Vec::with_capacity(n * split);
                for i in 0..n {
                    let s = gy.sample_slice(i);
                    gx.extend_from_slice(&s[..split]);
                    gyy.extend_from_slice(&s[split..]);
                }
                let gx = Tensor::from_vec([n, c, h, w], gx).expect("split");
                let gyy = Tensor::from_vec([n, c, h, w], gyy).expect("split");
                self.accumulate(grads, *x, sobel_backward(&gx, &gyy));
            }
            Op::MeanAbsDiff(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = gy.data()[0] / T::from_usize_lossy(ta.numel());
                let d = ta
                    .zip_map(tb, |x, y| {
                        if x > y {
                            k
                        } else if x < y {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .expect("same shape");
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanSqToConst(a, target) => {
                let ta = self.value(*a);
                let k = T::lit(2.0) * gy.data()[0] / T::from_usize_lossy(ta.numel());
                let t = *target;
                self.accumulate(grads, *a, ta.map(|x| (x - t) * k));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.shape(*logits);
                let [n, c, h, w] = shape;
                let plane = h * w;
                let k = gy.data()[0] / T::from_usize_lossy(n * plane);
                let mut d = Tensor::from_vec(shape, probs.clone()).expect("probs shape");
                for i in 0..n {
                    let s = d.sample_slice_mut(i);
                    for p in 0..plane {
                        s[labels[i * plane + p] as usize * plane + p] -= T::one();
                    }
                    for v in s.iter_mut().take(c * plane) {
                        *v *= k;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(shape: Shape, seed: u64, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = random(shape, seed);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input gradient").clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp);
                let l = build(&mut g, x);
                g.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs().max(a.abs()),
                "coord {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        // A smooth scalar readout: mean((y - r)^2) with random r folded in.
        let r = random(g.shape(y), seed);
        let r = g.constant(r);
        let d = g.sub(y, r);
        g.mean_sq_to(d, 0.3)
    }

    #[test]
    fn grad_conv_and_transpose() {
        check([2, 2, 5, 5], 1, |g, x| {
            let w = g.constant(random([3, 2, 3, 3], 2));
            let b = g.constant(random([1, 3, 1, 1], 3));
            let y = g.conv2d(x, w, Some(b), ConvGeom::new(3, 2, 1));
            let wt = g.constant(random([3, 2, 3, 3], 4));
            let z = g.conv_transpose2d(y, wt, None, ConvGeom::new(3, 2, 1), 1);
            weighted_sum(g, z, 5)
        });
    }

    #[test]
    fn grad_weights_through_conv() {
        check([3, 2, 3, 3], 6, |g, w| {
            let x = g.constant(random([1, 2, 6, 6], 7));
            let y = g.conv2d(x, w, None, ConvGeom::new(3, 1, 1));
            weighted_sum(g, y, 8)
        });
    }

    #[test]
    fn grad_normalizations() {
        check([2, 3, 4, 4], 9, |g, x| {
            let y = g.instance_norm(x, 1e-5);
            weighted_sum(g, y, 10)
        });
        check([2, 3, 4, 4], 11, |g, x| {
            let mu = g.constant(random([1, 3, 1, 1], 12));
            let sd = g.constant(random([1, 3, 1, 1], 13).map(|v| v.abs() + 0.5));
            let y = g.adain(x, mu, sd, 1e-5);
            weighted_sum(g, y, 14)
        });
    }

    #[test]
    fn grad_adain_through_style_stats() {
        // Style statistics taken from another tensor that depends on x.
        check([1, 2, 4, 4], 15, |g, x| {
            let s = g.scale(x, -0.7);
            let mu = g.channel_mean(s);
            let sd = g.channel_std(s);
            let c = g.constant(random([1, 2, 4, 4], 16));
            let y = g.adain(c, mu, sd, 1e-5);
            weighted_sum(g, y, 17)
        });
    }

    #[test]
    fn grad_elementwise_and_structural() {
        check([1, 2, 6, 6], 18, |g, x| {
            let a = g.leaky_relu(x, 0.2);
            let t = g.tanh(x);
            let c = g.concat(a, t);
            let r = g.resize_bilinear(c, 3, 9);
            let p = g.max_pool2(c);
            let p = g.pad_replicate(p, 2);
            let lr = weighted_sum(g, r, 19);
            let lp = weighted_sum(g, p, 20);
            let s = g.sobel(x);
            let ls = weighted_sum(g, s, 21);
            let l = g.sum_all(&[lr, lp, ls]);
            g.scale(l, 0.5)
        });
    }

    #[test]
    fn grad_losses() {
        check([1, 3, 4, 4], 22, |g, x| {
            let r = g.constant(random([1, 3, 4, 4], 23));
            let l1 = g.mean_abs_diff(x, r);
            let l2 = g.mean_sq_to(x, 1.0);
            g.add(l1, l2)
        });
        let labels: Vec<u8> = (0..2 * 9).map(|i| (i % 4) as u8).collect();
        check([2, 4, 3, 3], 24, move |g, x| g.cross_entropy(x, labels.clone()));
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(random([1, 1, 2, 2], 1));
        let d = g.detach(x);
        let y = g.mean_sq_to(d, 0.0);
        let grads = g.backward(y);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 4, 2, 2]));
        let l = g.cross_entropy(x, vec![0, 1, 2, 3]);
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }
}
