use crate::error::{argument, Result};

/// Dense `N x K x H x W` array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub(crate) shape: [usize; 4],
    pub(crate) data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(argument(format!("tensor {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    /// Single-sample tensor `1 x K x H x W` from band-sequential volume data.
    pub fn from_volume(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([1, channels, height, width], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `n` as a contiguous `K x H x W` slice.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
