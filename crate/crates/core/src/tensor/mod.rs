//! Dense row-major tensors and the reverse-mode tape that differentiates them.
//!
//! Values are stored as `f64`. A tensor tagged [`Precision::F32`] holds only
//! values that are exactly representable in binary32: every op rounds its
//! output (and every backward rule its gradient) through `f32` before storing.

mod gradcheck;
mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheck};
pub use ops::{Activation, BatchNormStats, NormMode};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub(crate) fn round_all(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    precision: Precision,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rounding `data` to `precision`.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        precision.round_all(&mut data);
        Ok(Tensor {
            shape,
            precision,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernel outputs: rounds, skips the shape check.
    pub(crate) fn from_raw(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        precision.round_all(&mut data);
        Tensor {
            shape,
            precision,
            data: Arc::new(data),
        }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f64).collect(), Precision::F32)
    }

    pub fn scalar(v: f64, precision: Precision) -> Self {
        Tensor::from_raw(vec![], vec![v], precision)
    }

    pub fn full(shape: Vec<usize>, v: f64, precision: Precision) -> Self {
        let n = numel(&shape);
        Tensor::from_raw(shape, vec![v; n], precision)
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        Tensor::full(shape, 0.0, precision)
    }

    pub fn ones(shape: Vec<usize>, precision: Precision) -> Self {
        Tensor::full(shape, 1.0, precision)
    }

    /// Normal(0, std²) samples.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, precision: Precision, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_raw(shape, data, precision)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, lo: f64, hi: f64, precision: Precision, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_raw(shape, data, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn with_precision(&self, precision: Precision) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.to_vec(), precision)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            precision: self.precision,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect(), self.precision)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Bit-level equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_tensors_hold_representable_values() {
        let t = Tensor::new(vec![1], vec![0.1], Precision::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let t = Tensor::new(vec![1], vec![0.1], Precision::F64).unwrap();
        assert_eq!(t.data()[0], 0.1);
    }

    #[test]
    fn element_count_must_match_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5], Precision::F64).is_err());
        assert!(Tensor::new(vec![2, 0], vec![], Precision::F64).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }
}
