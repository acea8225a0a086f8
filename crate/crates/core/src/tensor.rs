//! Dense 4-D tensors in NCHW layout.

use crate::error::{invalid_input, Result};
use crate::scalar::Scalar;

/// Shape of a tensor: batch, channels, height, width.
pub type Shape = [usize; 4];

/// Dense row-major NCHW tensor.
///
/// Every tensor in the engine is 4-D; scalars are `[1, 1, 1, 1]` and
/// per-channel vectors are `[1, C, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(invalid_input!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Spatial element count `H * W`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.index(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let i = self.index(idx);
        self.data[i] = v;
    }

    /// The `H * W` plane of sample `n`, channel `c`.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_slice_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n` as one contiguous slice.
    pub fn sample_slice(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_slice_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape[1] * self.plane();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(invalid_input!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.numel().max(1))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(invalid_input!(
                "shape mismatch: expected {shape:?}, got {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// Copies samples `[start, start + len)` along the batch axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Self {
        let s = self.shape[1] * self.plane();
        Tensor {
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * s..(start + len) * s].to_vec(),
        }
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| invalid_input!("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(invalid_input!(
                    "stack: {:?} vs {:?}",
                    t.shape,
                    first.shape
                ));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Element-type conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Swaps the two spatial axes.
    pub fn transpose_hw(&self) -> Self {
        let [n, c, h, w] = self.shape;
        let mut out = Tensor::zeros([n, c, w, h]);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set([i, j, x, y], self.at([i, j, y, x]));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
        let t = Tensor::<f32>::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at([0, 1, 0, 1]), 5.0);
        assert_eq!(t.plane_slice(0, 1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn stack_and_narrow_are_inverse() {
        let a = Tensor::<f64>::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c * 9 + y * 3 + x) as f64);
        let b = a.map(|v| -v);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), [2, 2, 3, 3]);
        assert_eq!(s.narrow_batch(1, 1), b);
        assert_eq!(s.narrow_batch(0, 1), a);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a = Tensor::<f32>::from_fn([1, 1, 2, 5], |[_, _, y, x]| (y * 10 + x) as f32);
        assert_eq!(a.transpose_hw().shape(), [1, 1, 5, 2]);
        assert_eq!(a.transpose_hw().transpose_hw(), a);
    }
}
