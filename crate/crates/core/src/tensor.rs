//! Dense row-major `f64` tensors.
//!
//! This is deliberately minimal: a shape and a flat buffer. Every kernel in
//! the crate works on contiguous slices, so there are no strides or views.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a buffer of matching length.
    ///
    /// Panics if the buffer length disagrees with the shape; callers that
    /// take external data should validate first (see [`Tensor::try_new`]).
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor buffer of length {} does not fit shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn try_new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Option<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        (n == data.len()).then_some(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} to {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in axpy");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Contiguous slab `index` along the leading axis.
    pub fn slab(&self, index: usize) -> &[f64] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[index * inner..(index + 1) * inner]
    }

    pub fn slab_mut(&mut self, index: usize) -> &mut [f64] {
        let inner: usize = self.shape[1..].iter().product();
        &mut self.data[index * inner..(index + 1) * inner]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(6).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::try_new([2, 3], vec![0.0; 5]).is_none());
        let t = Tensor::new([2, 3], (0..6).map(f64::from).collect());
        assert_eq!(t.slab(1), &[3.0, 4.0, 5.0]);
        let r = t.reshape([3, 2]);
        assert_eq!(r.shape(), &[3, 2]);
    }

    #[test]
    fn axpy_accumulates() {
        let mut a = Tensor::ones([3]);
        a.axpy(2.0, &Tensor::full([3], 0.5));
        assert_eq!(a.data(), &[2.0, 2.0, 2.0]);
    }
}
