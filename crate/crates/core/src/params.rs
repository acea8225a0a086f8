//! Named parameter sets and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{invalid_input, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Zero-mean Gaussian initialized weight.
    pub fn gaussian(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        self.push(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Shape) -> ParamId {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Replaces every tensor by name, checking shapes.
    pub fn load_from(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| invalid_input!("missing parameter {name}"))?;
            if t.shape() != slot.shape() {
                return Err(invalid_input!(
                    "parameter {name}: expected {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Registers every tensor in `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.leaf(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph handles for one bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls this set's gradients out of a backward pass, zero-filling
    /// parameters the loss did not reach.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let ok = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !ok(&m, &self.m) || !ok(&v, &self.v) {
            return Err(invalid_input!("optimizer state does not match parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: T) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&ps, 0.5, 0.999);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.2]).unwrap();
        opt.update(&mut ps, &[g], 0.1);
        let w = ps.get(ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = rand::rng();
        ps.gaussian("w", [2, 3, 3, 3], 0.02, &mut rng);
        let before = ps.clone();
        let mut opt = Adam::new(&ps, 0.5, 0.999);
        let g = Tensor::full([2, 3, 3, 3], 0.5);
        opt.update(&mut ps, &[g], 0.0);
        assert_eq!(ps, before);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.push("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(&ps, 0.9, 0.999);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = ps.bind(&mut g, true);
            let l = g.mean_sq_to(b.var(id), 1.0);
            let mut grads = g.backward(l);
            let gs = b.gradients(&mut grads, &ps);
            opt.update(&mut ps, &gs, 0.01);
        }
        assert!((ps.get(id).data()[0] - 1.0).abs() < 1e-3);
    }
}
