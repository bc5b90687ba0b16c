//! Dense n-dimensional tensors and the numeric kernels that operate on them.
//!
//! A [`Tensor`] is a shape plus a contiguous row-major value buffer. Image
//! batches use the layout `[N, H, W, C]` (examples, height, width, channels).
//! Kernels live in [`kernels`] as pure functions; [`tape`] records kernel
//! applications so they can be replayed in reverse for gradients;
//! [`gradcheck`] is the finite-difference oracle the test suites use; and
//! [`rng`] is the seedable PCG32 generator behind every random decision in the
//! library.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use rng::{streams, Pcg32};

/// Dense n-dimensional array with row-major contiguous storage.
///
/// The element count always equals the product of the extents, and the shape
/// never changes after construction ([`Tensor::reshape`] builds a new value).
/// A rank-0 tensor (empty shape) holds exactly one element and models a
/// scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and a matching value buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {shape:?} implies {expected} elements but {} were provided",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); len],
        }
    }

    /// Constant tensor of the given shape.
    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Tensor of the given shape filled by an independent uniform draw in
    /// `[-range, range)` per element.
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, range: f64, rng: &mut Pcg32) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| S::from_f64_lossy(rng.uniform(-range, range)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of elements (product of the extents; 1 for rank 0).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single element of a rank-0 tensor (or of any one-element tensor).
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on a multi-element tensor");
        self.data[0]
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

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, idxs: &[usize]) -> usize {
        debug_assert_eq!(idxs.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idxs.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    /// Element at a multi-index.
    pub fn at(&self, idxs: &[usize]) -> S {
        self.data[self.offset(idxs)]
    }

    /// Same data viewed under a new shape with an equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || expected != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} elements of shape {:?} as {shape:?}",
                    self.data.len(),
                    self.shape
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements.
    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Converts every element to a different scalar precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Adds `other` into `self` elementwise (gradient accumulation).
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "accumulate",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", … {} more", self.data.len() - PREVIEW)?;
        }
        write!(f, "]")
    }
}

/// Output-size convention for convolution and pooling windows.
///
/// `Same` sizes the output as `ceil(input / stride)` and splits the implied
/// padding as (floor, ceil) over the (leading, trailing) edges; `Valid` uses
/// no padding and only complete windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// Output extent along one axis.
    pub fn out_dim(self, input: usize, k: usize, stride: usize) -> Result<usize> {
        if stride == 0 {
            return Err(Error::Config("stride must be ≥ 1".into()));
        }
        match self {
            Padding::Same => Ok(input.div_ceil(stride)),
            Padding::Valid => {
                if k > input {
                    Err(Error::shape(
                        "out_dim",
                        format!("window {k} larger than input extent {input} under VALID padding"),
                    ))
                } else {
                    Ok((input - k) / stride + 1)
                }
            }
        }
    }

    /// Padding applied before the first element along one axis.
    pub fn pad_before(self, input: usize, k: usize, stride: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same => {
                let out = self.out_dim(input, k, stride)?;
                let covered = (out - 1) * stride + k;
                let total = covered.saturating_sub(input);
                Ok(total / 2)
            }
        }
    }
}
