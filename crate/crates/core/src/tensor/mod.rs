//! Dense tensors and the small set of kernels the fusion and generator
//! networks are built from.
//!
//! Layout is row-major with channels innermost. A feature map is a rank-3
//! tensor `[height, width, channels]`; a stack of feature maps adds a leading
//! group axis, `[group, height, width, channels]`.

mod dump;
mod gradcheck;
pub mod ops;
mod optim;
mod tape;

use std::fmt;

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

pub use dump::{read_tensor, read_tensor_from, write_tensor, write_tensor_to};
pub use gradcheck::{grad_check, grad_check_many, grad_check_with, GradCheckReport, RELU_MARGIN};
pub use ops::{
    avg_pool2, channel_normalize, concat_channels, conv2d, elementwise, group_mean, nearest_resize, nearest_upsample, split_channels,
    ConvParams, ElementwiseOp, Normalized, DEFAULT_EPSILON, KERNEL,
};
pub use optim::Adam;
pub use tape::{GradTape, Gradients, Var};

/// Maximum number of axes a tensor may have.
pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {detail}")]
    Parameter { op: &'static str, detail: String },
    #[error("{op}: empty group")]
    EmptyGroup { op: &'static str },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("relu pre-activation within {margin:e} of the kink")]
    NearKink { margin: f64 },
    #[error("tensor dump: {0}")]
    Dump(String),
}

pub type Result<T, E = KernelError> = std::result::Result<T, E>;

/// Floating point element type of a [`Tensor`].
pub trait Scalar: Float + Send + Sync + fmt::Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(KernelError::Parameter {
                op: "tensor",
                detail: format!("rank {} outside 1..={MAX_RANK}", shape.len()),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KernelError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.len() <= MAX_RANK, "bad rank");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(KernelError::Shape {
                op: "reshape",
                expected: self.shape.clone(),
                actual: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(height, width, channels)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(KernelError::Shape {
                op: "hwc",
                expected: vec![0, 0, 0],
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Stack equally shaped rank-3 tensors along a new leading group axis.
    pub fn stack(slices: &[Tensor<T>]) -> Result<Self> {
        let first = slices.first().ok_or(KernelError::EmptyGroup { op: "stack" })?;
        let (h, w, c) = first.hwc()?;
        let mut data = Vec::with_capacity(first.len() * slices.len());
        for s in slices {
            if s.shape != first.shape {
                return Err(KernelError::Shape {
                    op: "stack",
                    expected: first.shape.clone(),
                    actual: s.shape.clone(),
                });
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            shape: vec![slices.len(), h, w, c],
            data,
        })
    }

    /// The `index`-th slice along the leading axis of a rank-4 tensor.
    pub fn slice_group(&self, index: usize) -> Result<Self> {
        match self.shape[..] {
            [g, h, w, c] if index < g => {
                let n = h * w * c;
                Ok(Self {
                    shape: vec![h, w, c],
                    data: self.data[index * n..(index + 1) * n].to_vec(),
                })
            }
            _ => Err(KernelError::Shape {
                op: "slice_group",
                expected: vec![index + 1, 0, 0, 0],
                actual: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(KernelError::NonFinite { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn stack_and_slice_round_trip() {
        let a = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2, 1], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 1]);
        assert_eq!(s.slice_group(1).unwrap(), b);
        assert_eq!(s.slice_group(0).unwrap(), a);
        assert!(s.slice_group(2).is_err());
    }
}
