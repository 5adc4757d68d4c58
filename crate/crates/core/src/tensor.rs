//! Dense row-major tensors.
//!
//! Storage is a flat `Vec` plus a shape; the last axis is contiguous. Network
//! code runs in `f32`, while the small differentiable kernels (heads, losses,
//! GTM) are generic so they can be checked in `f64`.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Float + Default + Sum + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", parts.join(", "))
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                format!("{} elements for shape {}", numel(shape), fmt_shape(shape)),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                format!("{} elements", self.data.len()),
                format!("reshape to {}", fmt_shape(shape)),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// Contiguous slice of the sub-tensor at `index` along the leading axis.
    pub fn outer(&self, index: usize) -> &[T] {
        let stride = numel(&self.shape[1..]);
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn outer_mut(&mut self, index: usize) -> &mut [T] {
        let stride = numel(&self.shape[1..]);
        &mut self.data[index * stride..(index + 1) * stride]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(fmt_shape(&first.shape), fmt_shape(&t.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenates along axis 1 (channels of an `(N, C, ...)` tensor).
    pub fn cat_channels(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concatenate zero tensors".into()))?;
        let n = first.shape[0];
        let tail = &first.shape[2..];
        let mut channels = 0;
        for t in items {
            if t.shape[0] != n || &t.shape[2..] != tail {
                return Err(Error::shape(fmt_shape(&first.shape), fmt_shape(&t.shape)));
            }
            channels += t.shape[1];
        }
        let mut data = Vec::with_capacity(n * channels * numel(tail));
        for b in 0..n {
            for t in items {
                data.extend_from_slice(t.outer(b));
            }
        }
        let mut shape = vec![n, channels];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{}", fmt_shape(&self.shape))
    }
}
