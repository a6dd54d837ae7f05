//! Dense `f64` tensors, the layer primitives of the regressor, and a small
//! reverse-mode autodiff graph over them.
//!
//! Layouts follow the usual deep-learning conventions: feature maps are
//! `(channels, spatial...)`, convolution kernels are
//! `(out_channels, in_channels, spatial...)`, and fully connected weights are
//! `(out, in)`. Both 2D and 3D spatial layouts are supported everywhere.

mod adadelta;
mod graph;
mod ops;
mod params;

pub use adadelta::{AdadeltaConfig, AdadeltaState};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{
    concat_channels, conv, conv_backward, dropout_apply, dropout_mask, fully_connected,
    global_avg_pool, relu, ConvGrads, ConvSpec,
};
pub use params::{ParamId, Parameters};

use crate::error::{Error, Result};

/// Row-major dense array of `f64` with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} values but {} were supplied",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1-D tensor holding `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent of a `(channels, spatial...)` tensor.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn spatial(&self) -> &[usize] {
        self.shape.get(1..).unwrap_or(&[])
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channels `range` of a `(channels, spatial...)` tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.channels() {
            return Err(Error::shape(format!(
                "channel range {:?} out of bounds for {} channels",
                range,
                self.channels()
            )));
        }
        let plane: usize = self.spatial().iter().product();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Ok(Self {
            shape,
            data: self.data[range.start * plane..range.end * plane].to_vec(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}
