//! Dense row-major tensors of rank 1 to 4.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Element type the network can run in. Implemented for `f32` (training) and
/// `f64` (gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> DenseTensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor { shape: shape.to_vec(), data: vec![S::zero(); len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(Error::Shape(format!("unsupported tensor shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(DenseTensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Leading dimension (the batch axis for activations).
    pub fn outer(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn inner(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> DenseTensor<T> {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| T::of_f64(x.as_f64())).collect() }
    }

    /// Flattens to a `shape[0] × inner` `f64` matrix.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.data.iter().map(|x| x.as_f64()).collect();
        Matrix::from_vec(self.outer(), self.inner(), data).expect("consistent tensor shape")
    }

    pub fn from_matrix(shape: &[usize], m: &Matrix) -> Result<Self> {
        Self::from_vec(shape, m.as_slice().iter().map(|&x| S::of_f64(x)).collect())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Self {
        let inner = self.inner();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        DenseTensor { shape, data: self.data[start * inner..end * inner].to_vec() }
    }

    /// Gathers rows along the leading axis.
    pub fn select_outer(&self, indices: &[usize]) -> Self {
        let inner = self.inner();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        DenseTensor { shape, data }
    }
}
