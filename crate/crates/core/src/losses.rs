//! Generator and discriminator objectives.
//!
//! Reconstruction and gradient terms are per-element mean L1 distances so
//! the loss weights do not depend on patch size. The adversarial terms use
//! least-squares targets: real = 1, fake = 0, generator aims for 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid_input, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the four generator loss terms (cross, self, gradient,
/// adversarial). The adversarial weight also scales the discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 10.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(crate::Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            lambda1: self.lambda1 * k,
            lambda2: self.lambda2 * k,
            lambda3: self.lambda3 * k,
            lambda4: self.lambda4 * k,
        }
    }
}

/// Unweighted loss terms of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cross: f64,
    pub self_: f64,
    pub grad: f64,
    pub adv_g: f64,
    pub adv_d: f64,
}

/// All loss terms plus the weighted totals. Field order is the column order
/// of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cross: f64,
    #[serde(rename = "self")]
    pub self_: f64,
    pub grad: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cross", self.cross),
            ("self", self.self_),
            ("grad", self.grad),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `L_G = l1*cross + l2*self + l3*grad + l4*adv_g` and `L_D = l4*adv_d`.
pub fn total_losses(c: LossComponents, w: &LossWeights) -> LossReport {
    LossReport {
        cross: c.cross,
        self_: c.self_,
        grad: c.grad,
        adv_g: c.adv_g,
        adv_d: c.adv_d,
        total_g: w.lambda1 * c.cross + w.lambda2 * c.self_ + w.lambda3 * c.grad + w.lambda4 * c.adv_g,
        total_d: w.lambda4 * c.adv_d,
    }
}

// Graph builders shared by training and the plain-tensor entry points.

pub(crate) fn pair_l1<T: Scalar>(g: &mut Graph<T>, a: Var, a2: Var, b: Var, b2: Var) -> Var {
    let la = g.mean_abs_diff(a, a2);
    let lb = g.mean_abs_diff(b, b2);
    g.add(la, lb)
}

pub(crate) fn gradient_l1<T: Scalar>(g: &mut Graph<T>, a: Var, fake_a: Var, b: Var, fake_b: Var) -> Var {
    let (sa, sfa) = (g.sobel(a), g.sobel(fake_a));
    let (sb, sfb) = (g.sobel(b), g.sobel(fake_b));
    pair_l1(g, sa, sfa, sb, sfb)
}

pub(crate) fn adv_generator<T: Scalar>(g: &mut Graph<T>, d_fake_a: Var, d_fake_b: Var) -> Var {
    let la = g.mean_sq_to(d_fake_a, T::one());
    let lb = g.mean_sq_to(d_fake_b, T::one());
    g.add(la, lb)
}

pub(crate) fn adv_discriminator<T: Scalar>(
    g: &mut Graph<T>,
    d_real_a: Var,
    d_fake_a: Var,
    d_real_b: Var,
    d_fake_b: Var,
) -> Var {
    let terms = [
        g.mean_sq_to(d_real_a, T::one()),
        g.mean_sq_to(d_fake_a, T::zero()),
        g.mean_sq_to(d_real_b, T::one()),
        g.mean_sq_to(d_fake_b, T::zero()),
    ];
    let s = g.sum_all(&terms);
    g.scale(s, T::lit(0.5))
}

fn same_shape<T: Scalar>(pairs: &[(&Tensor<T>, &Tensor<T>)]) -> Result<()> {
    for (x, y) in pairs {
        if x.shape() != y.shape() {
            return Err(invalid_input!("shape mismatch {:?} vs {:?}", x.shape(), y.shape()));
        }
    }
    Ok(())
}

fn eval4<T: Scalar>(
    tensors: [&Tensor<T>; 4],
    build: impl FnOnce(&mut Graph<T>, Var, Var, Var, Var) -> Var,
) -> T {
    let mut g = Graph::new();
    let [a, b, c, d] = tensors.map(|t| g.constant(t.clone()));
    let out = build(&mut g, a, b, c, d);
    g.scalar(out)
}

/// `mean|A - A''| + mean|B - B''|`.
pub fn cross_reconstruction_loss<T: Scalar>(
    a: &Tensor<T>,
    a_rec: &Tensor<T>,
    b: &Tensor<T>,
    b_rec: &Tensor<T>,
) -> Result<T> {
    same_shape(&[(a, a_rec), (b, b_rec)])?;
    Ok(eval4([a, a_rec, b, b_rec], pair_l1))
}

/// `mean|A - A'| + mean|B - B'|`.
pub fn self_reconstruction_loss<T: Scalar>(
    a: &Tensor<T>,
    a_self: &Tensor<T>,
    b: &Tensor<T>,
    b_self: &Tensor<T>,
) -> Result<T> {
    same_shape(&[(a, a_self), (b, b_self)])?;
    Ok(eval4([a, a_self, b, b_self], pair_l1))
}

/// Mean L1 between the Sobel responses (both components) of each image and
/// its translation, summed over the two domains.
pub fn gradient_loss<T: Scalar>(
    a: &Tensor<T>,
    fake_a: &Tensor<T>,
    b: &Tensor<T>,
    fake_b: &Tensor<T>,
) -> Result<T> {
    same_shape(&[(a, fake_a), (b, fake_b)])?;
    for t in [a, b] {
        if t.height() < 3 || t.width() < 3 {
            return Err(invalid_input!("gradient_loss needs images of at least 3x3"));
        }
    }
    Ok(eval4([a, fake_a, b, fake_b], gradient_l1))
}

/// Least-squares adversarial terms `(adv_g, adv_d)` from the four realness
/// maps. `d_fake_a` is the score of the B-styled fake A, judged by the
/// domain-B discriminator, and symmetrically for `d_fake_b`.
pub fn adversarial_losses<T: Scalar>(
    d_real_a: &Tensor<T>,
    d_fake_a: &Tensor<T>,
    d_real_b: &Tensor<T>,
    d_fake_b: &Tensor<T>,
) -> Result<(T, T)> {
    for t in [d_real_a, d_fake_a, d_real_b, d_fake_b] {
        if !t.all_finite() {
            return Err(invalid_input!("non-finite discriminator score"));
        }
    }
    let adv_g = eval4([d_real_a, d_fake_a, d_real_b, d_fake_b], |g, _, fa, _, fb| {
        adv_generator(g, fa, fb)
    });
    let adv_d = eval4([d_real_a, d_fake_a, d_real_b, d_fake_b], adv_discriminator);
    Ok((adv_g, adv_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::sobel_gradients;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        let (a, b) = (random([1, 3, 8, 8], 1), random([1, 3, 8, 8], 2));
        assert_eq!(cross_reconstruction_loss(&a, &a, &b, &b).unwrap(), 0.0);
        assert_eq!(self_reconstruction_loss(&a, &a, &b, &b).unwrap(), 0.0);
        assert_eq!(gradient_loss(&a, &a, &b, &b).unwrap(), 0.0);
    }

    #[test]
    fn constant_offsets() {
        let (a, b) = (random([1, 3, 8, 8], 3), random([1, 3, 8, 8], 4));
        let cross = cross_reconstruction_loss(&a, &a.map(|v| v + 0.5), &b, &b).unwrap();
        assert_abs_diff_eq!(cross, 0.5, epsilon = 1e-12);
        let own = self_reconstruction_loss(&a, &a.map(|v| v - 1.0), &b, &b.map(|v| v + 1.0)).unwrap();
        assert_abs_diff_eq!(own, 2.0, epsilon = 1e-12);
        // Sobel annihilates constant shifts.
        let grad = gradient_loss(&a, &a.map(|v| v + 0.3), &b, &b).unwrap();
        assert_abs_diff_eq!(grad, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_loss_symmetric_in_pairs() {
        let t: Vec<_> = (0..4).map(|s| random([1, 3, 6, 6], 10 + s)).collect();
        let f = cross_reconstruction_loss(&t[0], &t[1], &t[2], &t[3]).unwrap();
        let r = cross_reconstruction_loss(&t[2], &t[3], &t[0], &t[1]).unwrap();
        assert_abs_diff_eq!(f, r, epsilon = 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = random([1, 3, 8, 8], 1);
        let b = random([1, 3, 8, 4], 2);
        assert!(cross_reconstruction_loss(&a, &b, &a, &a).is_err());
        assert!(self_reconstruction_loss(&a, &a, &a, &b).is_err());
        assert!(gradient_loss(&a, &b, &a, &a).is_err());
    }

    #[test]
    fn ramp_versus_flat_gradient_term() {
        let ramp = Tensor::<f64>::from_fn([1, 1, 8, 8], |[_, _, _, x]| x as f64);
        let flat = Tensor::<f64>::zeros([1, 1, 8, 8]);
        let z = Tensor::<f64>::zeros([1, 1, 8, 8]);
        let term = gradient_loss(&ramp, &flat, &z, &z).unwrap();
        // Oracle: brute-force Sobel then average |gx| and |gy| over both maps.
        let (gx, gy) = sobel_gradients(&ramp).unwrap();
        let expect = (gx.data().iter().map(|v| v.abs()).sum::<f64>()
            + gy.data().iter().map(|v| v.abs()).sum::<f64>())
            / (2.0 * 64.0);
        assert_abs_diff_eq!(term, expect, epsilon = 1e-12);
        // 6 interior columns at 8, 2 border columns at 4, no vertical part.
        assert_abs_diff_eq!(term, (6.0 * 8.0 + 2.0 * 4.0) / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn adversarial_fixed_points_and_arithmetic() {
        let ones = Tensor::<f64>::full([1, 1, 4, 4], 1.0);
        let zeros = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let half = Tensor::<f64>::full([1, 1, 4, 4], 0.5);
        let (g, _) = adversarial_losses(&zeros, &ones, &zeros, &ones).unwrap();
        assert_eq!(g, 0.0);
        let (_, d) = adversarial_losses(&ones, &zeros, &ones, &zeros).unwrap();
        assert_eq!(d, 0.0);
        let (g, _) = adversarial_losses(&ones, &half, &ones, &zeros).unwrap();
        assert_abs_diff_eq!(g, 1.25, epsilon = 1e-12);
        let nan = Tensor::<f64>::full([1, 1, 4, 4], f64::NAN);
        assert!(adversarial_losses(&ones, &nan, &ones, &ones).is_err());
    }

    #[test]
    fn weighted_totals() {
        let c = LossComponents { cross: 0.1, self_: 0.2, grad: 0.3, adv_g: 0.4, adv_d: 0.7 };
        let r = total_losses(c, &LossWeights::default());
        assert_abs_diff_eq!(r.total_g, 6.4, epsilon = 1e-12);
        assert_abs_diff_eq!(r.total_d, 0.7, epsilon = 1e-12);
        let z = total_losses(LossComponents::default(), &LossWeights::default());
        assert_eq!((z.total_g, z.total_d), (0.0, 0.0));
    }

    #[test]
    fn report_names_first_nan() {
        let mut r = total_losses(LossComponents::default(), &LossWeights::default());
        assert_eq!(r.first_non_finite(), None);
        r.grad = f64::NAN;
        r.adv_d = f64::INFINITY;
        assert_eq!(r.first_non_finite(), Some("grad"));
    }

    #[test]
    fn log_field_order() {
        let r = total_losses(LossComponents { cross: 1.0, ..Default::default() }, &LossWeights::default());
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.starts_with(r#"{"cross":1.0,"self":0.0,"grad":0.0,"adv_g":0.0,"adv_d":0.0,"total_g":10.0"#));
    }

    proptest! {
        #[test]
        fn totals_are_homogeneous_in_weights(
            parts in prop::array::uniform5(0.0f64..5.0),
            w in prop::array::uniform4(0.0f64..20.0),
            k in 0.0f64..10.0,
        ) {
            let c = LossComponents { cross: parts[0], self_: parts[1], grad: parts[2], adv_g: parts[3], adv_d: parts[4] };
            let lw = LossWeights { lambda1: w[0], lambda2: w[1], lambda3: w[2], lambda4: w[3] };
            let base = total_losses(c, &lw);
            let scaled = total_losses(c, &lw.scaled(k));
            prop_assert!((scaled.total_g - k * base.total_g).abs() <= 1e-9 * (1.0 + scaled.total_g.abs()));
            prop_assert!((scaled.total_d - k * base.total_d).abs() <= 1e-9 * (1.0 + scaled.total_d.abs()));
        }

        #[test]
        fn l1_terms_invariant_under_joint_pixel_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<_> = (0..4).map(|s| random([1, 2, 4, 4], seed * 7 + s)).collect();
            let mut perm: Vec<usize> = (0..t[0].numel()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permute = |x: &Tensor<f64>| {
                Tensor::from_vec(x.shape(), perm.iter().map(|&i| x.data()[i]).collect()).unwrap()
            };
            let p: Vec<_> = t.iter().map(permute).collect();
            let before = self_reconstruction_loss(&t[0], &t[1], &t[2], &t[3]).unwrap();
            let after = self_reconstruction_loss(&p[0], &p[1], &p[2], &p[3]).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
            prop_assert!(before >= 0.0);
        }
    }
}
