//! Forward/backward kernels for the layers the autodiff graph records.

use std::any::Any;
use std::cell::RefCell;

use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

thread_local! {
    static SCRATCH: RefCell<Vec<Box<dyn Any>>> = const { RefCell::new(Vec::new()) };
}

/// Column buffer with unspecified contents, reused across calls on this
/// thread. Callers overwrite it fully before reading.
struct Scratch<T: Scalar> {
    buf: Vec<T>,
    len: usize,
}

impl<T: Scalar> Scratch<T> {
    fn new(len: usize) -> Self {
        let reused = SCRATCH.with(|pool| {
            let mut pool = pool.borrow_mut();
            let i = pool.iter().position(|b| b.is::<Vec<T>>())?;
            pool.swap_remove(i).downcast::<Vec<T>>().ok()
        });
        let mut buf = reused.map_or_else(Vec::new, |b| *b);
        if buf.len() < len {
            buf.resize(len, T::zero());
        }
        Scratch { buf, len }
    }

    fn empty() -> Self {
        Scratch { buf: Vec::new(), len: 0 }
    }
}

impl<T: Scalar> std::ops::Deref for Scratch<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.buf[..self.len]
    }
}

impl<T: Scalar> std::ops::DerefMut for Scratch<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.buf[..self.len]
    }
}

impl<T: Scalar> Drop for Scratch<T> {
    fn drop(&mut self) {
        if self.buf.capacity() > 0 {
            let buf = std::mem::take(&mut self.buf);
            SCRATCH.with(|pool| pool.borrow_mut().push(Box::new(buf)));
        }
    }
}

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a convolution over an input of `len` pixels, or
    /// `None` when the padded input is smaller than the kernel.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution.
    pub fn transpose_out_len(&self, len: usize, out_pad: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.kernel + out_pad).checked_sub(2 * self.pad)
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..w`, as a half-open range.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, w: usize) -> (usize, usize) {
    // ox * stride + k >= pad  and  ox * stride + k < w + pad
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { (w + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Unfolds one `[C, H, W]` sample into `[C*K*K, Ho*Wo]` patch columns.
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let (s, p) = (g.stride, g.pad);
    let plane_out = ho * wo;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ho, s, ky, p, h);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(wo, s, kx, p, w);
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                dst[..ylo * wo].fill(T::zero());
                dst[yhi * wo..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let srow = &plane[iy * w..(iy + 1) * w];
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo < xhi {
                        let ix0 = xlo * s + kx - p;
                        if s == 1 {
                            line[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (j, slot) in line[xlo..xhi].iter_mut().enumerate() {
                                *slot = srow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds patch columns back into a `[C, H, W]` sample, accumulating.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let k = g.kernel;
    let (s, p) = (g.stride, g.pad);
    let plane_out = ho * wo;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ho, s, ky, p, h);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(wo, s, kx, p, w);
                if xlo >= xhi {
                    continue;
                }
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    let line = &src[oy * wo + xlo..oy * wo + xhi];
                    let ix0 = xlo * s + kx - p;
                    if s == 1 {
                        for (d, v) in drow[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            drow[ix0 + j * s] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let [n, c, _, _] = out.shape();
    for i in 0..n {
        for ch in 0..c {
            let b = bias.data()[ch];
            out.plane_slice_mut(i, ch).iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = dy.shape();
    let mut db = Tensor::zeros([1, c, 1, 1]);
    for i in 0..n {
        for ch in 0..c {
            db.data_mut()[ch] += dy.plane_slice(i, ch).iter().copied().sum::<T>();
        }
    }
    db
}

/// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, K, K]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [o, wc, k, _] = weight.shape();
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!(k, g.kernel);
    let ho = g.out_len(h).expect("conv input smaller than kernel");
    let wo = g.out_len(w).expect("conv input smaller than kernel");
    let ckk = c * k * k;
    let mut out = Tensor::zeros([n, o, ho, wo]);
    let mut cols = if is_pointwise(g) {
        Scratch::empty()
    } else {
        Scratch::new(ckk * ho * wo)
    };
    for i in 0..n {
        let colref: &[T] = if is_pointwise(g) {
            x.sample_slice(i)
        } else {
            im2col(x.sample_slice(i), c, h, w, g, ho, wo, &mut cols);
            &cols
        };
        gemm(
            o,
            ckk,
            ho * wo,
            weight.data(),
            Trans::No,
            colref,
            Trans::No,
            T::zero(),
            out.sample_slice_mut(i),
        );
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

/// Gradients of [`conv2d`]: `(dx, dw, db)`, each computed only if asked.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, h, w] = x.shape();
    let [o, _, k, _] = weight.shape();
    let [_, _, ho, wo] = dy.shape();
    let ckk = c * k * k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let pointwise = is_pointwise(g);
    let mut cols = if pointwise || !need_dw {
        Scratch::empty()
    } else {
        Scratch::new(ckk * ho * wo)
    };
    let mut dcols = if pointwise || !need_dx {
        Scratch::empty()
    } else {
        Scratch::new(ckk * ho * wo)
    };
    for i in 0..n {
        let dyi = dy.sample_slice(i);
        if let Some(dw) = dw.as_mut() {
            let colref: &[T] = if pointwise {
                x.sample_slice(i)
            } else {
                im2col(x.sample_slice(i), c, h, w, g, ho, wo, &mut cols);
                &cols
            };
            gemm(
                o,
                ho * wo,
                ckk,
                dyi,
                Trans::No,
                colref,
                Trans::Yes,
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            if pointwise {
                gemm(
                    ckk,
                    o,
                    ho * wo,
                    weight.data(),
                    Trans::Yes,
                    dyi,
                    Trans::No,
                    T::one(),
                    dx.sample_slice_mut(i),
                );
            } else {
                gemm(
                    ckk,
                    o,
                    ho * wo,
                    weight.data(),
                    Trans::Yes,
                    dyi,
                    Trans::No,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, c, h, w, g, ho, wo, dx.sample_slice_mut(i));
            }
        }
    }
    (dx, dw, need_db.then(|| bias_grad(dy)))
}

/// Transposed convolution of `x: [N, Cin, H, W]` with `w: [Cin, Cout, K, K]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
    out_pad: usize,
) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let [wcin, cout, k, _] = weight.shape();
    assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
    let ho = g.transpose_out_len(h, out_pad).expect("invalid transposed geometry");
    let wo = g.transpose_out_len(w, out_pad).expect("invalid transposed geometry");
    let ckk = cout * k * k;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let mut cols = Scratch::new(ckk * h * w);
    for i in 0..n {
        gemm(
            ckk,
            cin,
            h * w,
            weight.data(),
            Trans::Yes,
            x.sample_slice(i),
            Trans::No,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, cout, ho, wo, g, h, w, out.sample_slice_mut(i));
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, cin, h, w] = x.shape();
    let [_, cout, k, _] = weight.shape();
    let [_, _, ho, wo] = dy.shape();
    let ckk = cout * k * k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    if need_dx || need_dw {
        let mut cols = Scratch::new(ckk * h * w);
        for i in 0..n {
            im2col(dy.sample_slice(i), cout, ho, wo, g, h, w, &mut cols);
            if let Some(dx) = dx.as_mut() {
                gemm(
                    cin,
                    ckk,
                    h * w,
                    weight.data(),
                    Trans::No,
                    &cols,
                    Trans::No,
                    T::zero(),
                    dx.sample_slice_mut(i),
                );
            }
            if let Some(dw) = dw.as_mut() {
                gemm(
                    cin,
                    h * w,
                    ckk,
                    x.sample_slice(i),
                    Trans::No,
                    &cols,
                    Trans::Yes,
                    T::one(),
                    dw.data_mut(),
                );
            }
        }
        }
    (dx, dw, need_db.then(|| bias_grad(dy)))
}

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

/// Half-pixel-centre bilinear sampling positions (the `align_corners =
/// false` convention).
fn taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                frac: T::lit(src - i0 as f64),
            }
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane_slice(i, ch);
            let dst = out.plane_slice_mut(i, ch);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let top = src[a.i0 * w + b.i0] * (T::one() - b.frac) + src[a.i0 * w + b.i1] * b.frac;
                    let bot = src[a.i1 * w + b.i0] * (T::one() - b.frac) + src[a.i1 * w + b.i1] * b.frac;
                    dst[oy * out_w + ox] = top * (T::one() - a.frac) + bot * a.frac;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, c, out_h, out_w] = dy.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = taps::<T>(in_h, out_h);
    let tx = taps::<T>(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    for i in 0..n {
        for ch in 0..c {
            let src = dy.plane_slice(i, ch);
            let dst = dx.plane_slice_mut(i, ch);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let gv = src[oy * out_w + ox];
                    let top = gv * (T::one() - a.frac);
                    let bot = gv * a.frac;
                    dst[a.i0 * in_w + b.i0] += top * (T::one() - b.frac);
                    dst[a.i0 * in_w + b.i1] += top * b.frac;
                    dst[a.i1 * in_w + b.i0] += bot * (T::one() - b.frac);
                    dst[a.i1 * in_w + b.i1] += bot * b.frac;
                }
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pooling; also returns the flat argmax of each window.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane_slice(i, ch);
            let dst = out.plane_slice_mut(i, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for idx in [
                        (2 * oy) * w + 2 * ox + 1,
                        (2 * oy + 1) * w + 2 * ox,
                        (2 * oy + 1) * w + 2 * ox + 1,
                    ] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u32], in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let mut dx = Tensor::zeros(in_shape);
    let mut k = 0;
    for i in 0..n {
        for ch in 0..c {
            let src = dy.plane_slice(i, ch);
            let dst = dx.plane_slice_mut(i, ch);
            for &g in src.iter().take(oh * ow) {
                dst[arg[k] as usize] += g;
                k += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let [o, _, k, _] = w.shape();
        let (ho, wo) = (g.out_len(h).unwrap(), g.out_len(wd).unwrap());
        Tensor::from_fn([n, o, ho, wo], |[i, oc, oy, ox]| {
            let mut s = 0.0;
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.at([i, ic, iy as usize, ix as usize]) * w.at([oc, ic, ky, kx]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive() {
        for g in [
            ConvGeom::new(3, 1, 1),
            ConvGeom::new(3, 2, 1),
            ConvGeom::new(4, 2, 1),
            ConvGeom::new(1, 1, 0),
            ConvGeom::new(7, 1, 3),
            ConvGeom::new(3, 1, 0),
            ConvGeom::new(3, 2, 0),
            ConvGeom::new(2, 2, 0),
            ConvGeom::new(3, 1, 2),
            ConvGeom::new(5, 3, 4),
        ] {
            let x = random([2, 3, 9, 8], 1);
            let w = random([4, 3, g.kernel, g.kernel], 2);
            let y = conv2d(&x, &w, None, g);
            assert!(y.max_abs_diff(&naive_conv(&x, &w, g)) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        for g in [ConvGeom::new(3, 2, 1), ConvGeom::new(1, 1, 0), ConvGeom::new(4, 1, 1), ConvGeom::new(3, 1, 0), ConvGeom::new(5, 3, 4)] {
            let x = random([2, 3, 8, 8], 3);
            let w = random([5, 3, g.kernel, g.kernel], 4);
            let y = conv2d(&x, &w, None, g);
            let u = random(y.shape(), 5);
            let (dx, dw, _) = conv2d_backward(&x, &w, &u, g, true, true, false);
            // Linearity in x and in w separately.
            assert!((dot(&y, &u) - dot(&x, &dx.unwrap())).abs() < 1e-9);
            assert!((dot(&y, &u) - dot(&w, &dw.unwrap())).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let g = ConvGeom::new(3, 2, 1);
        let x = random([1, 4, 8, 8], 6);
        let w = random([4, 2, 3, 3], 7);
        let up = conv_transpose2d(&x, &w, None, g, 1);
        assert_eq!(up.shape(), [1, 2, 16, 16]);
        let v = random(up.shape(), 8);
        // <T x, v> == <x, conv(v)> where conv uses the same weight layout
        let down = conv2d(&v, &w, None, g);
        assert_eq!(down.shape(), x.shape());
        assert!((dot(&up, &v) - dot(&x, &down)).abs() < 1e-9);
        let (dx, dw, _) = conv_transpose2d_backward(&x, &w, &v, g, true, true, false);
        assert!((dot(&up, &v) - dot(&x, &dx.unwrap())).abs() < 1e-9);
        assert!((dot(&up, &v) - dot(&w, &dw.unwrap())).abs() < 1e-9);
    }

    #[test]
    fn bilinear_preserves_constants_and_is_adjoint() {
        let c = Tensor::<f64>::full([1, 2, 8, 8], 0.25);
        assert!(resize_bilinear(&c, 3, 5).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let x = random([1, 2, 8, 6], 9);
        let y = resize_bilinear(&x, 4, 12);
        let u = random(y.shape(), 10);
        let dx = resize_bilinear_backward(&u, 8, 6);
        assert!((dot(&y, &u) - dot(&x, &dx)).abs() < 1e-10);
    }

    #[test]
    fn bilinear_halving_averages_pairs() {
        let x = Tensor::<f64>::from_fn([1, 1, 2, 4], |[_, _, _, xx]| xx as f64);
        let y = resize_bilinear(&x, 1, 2);
        assert_eq!(y.data(), &[0.5, 2.5]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[4.0]);
        let dx = max_pool2_backward(&Tensor::scalar(1.0), &arg, x.shape());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
