use ndarray::Array2;
use num_complex::Complex;

use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::CImage;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), Shape, "tensor shape {shape:?} needs {n} values, got {}", data.len());
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape to {shape:?}");
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Changes precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// Planar `[2, H, W]` view of a complex image: real plane then imaginary.
    pub fn from_complex(img: &CImage<T>) -> Self {
        let (h, w) = img.dim();
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend(img.iter().map(|z| z.re));
        data.extend(img.iter().map(|z| z.im));
        Tensor { shape: vec![2, h, w], data }
    }

    /// Stacks equally sized complex images into `[N, 2, H, W]`.
    pub fn from_complex_batch<'a>(imgs: impl IntoIterator<Item = &'a CImage<T>>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in imgs {
            ensure!(dims.is_none_or(|d| d == img.dim()), Shape, "batch mixes {:?} and {:?}", dims, img.dim());
            dims = Some(img.dim());
            data.extend(img.iter().map(|z| z.re));
            data.extend(img.iter().map(|z| z.im));
            n += 1;
        }
        let (h, w) = dims.unwrap_or((0, 0));
        Tensor::new(vec![n, 2, h, w], data)
    }

    /// Inverse of [`Tensor::from_complex`] for tensors whose trailing dims
    /// are `[2, H, W]` (leading dims must be 1).
    pub fn to_complex(&self) -> Result<CImage<T>> {
        let r = self.shape.len();
        ensure!(
            r >= 3 && self.shape[r - 3] == 2 && self.shape[..r - 3].iter().all(|&d| d == 1),
            Shape,
            "expected [2, H, W] planar tensor, got {:?}",
            self.shape
        );
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let n = h * w;
        Ok(Array2::from_shape_fn((h, w), |(i, j)| Complex::new(self.data[i * w + j], self.data[n + i * w + j])))
    }
}

impl<T: Real> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}
