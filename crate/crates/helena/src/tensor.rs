//! Dense row-major real tensors, generic over scalar precision.
//!
//! Everything numeric in this crate moves through [`Tensor`]: resource-grid
//! planes, network activations, parameters, and gradients. Gradients are
//! computed by the tape in [`crate::tape`]; a `Tensor` itself only carries an
//! optional `grad` buffer of identical shape so callers can hold a value and
//! its gradient together.
//!
//! Two precisions are supported through the [`Scalar`] trait: `f64` for
//! gradient-check work and `f32` for training, inference, and every on-disk
//! format. There is a single implementation path for both.

use std::fmt::{Debug, Display};

use num_traits::Float;
use thiserror::Error;

/// Scalar element type of tensors. Implemented for `f32` and `f64`.
///
/// The two conversion methods are total (a plain `as` cast), so numeric code
/// can mix literal constants and precision-generic arithmetic without
/// fallible casts.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Errors raised by tensor construction and by shape-checked operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were provided")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: shapes {left:?} and {right:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} is out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("shape {shape:?} contains a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("{name} = {value} is out of range ({requirement})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
}

/// Dense n-dimensional array in row-major order.
///
/// Invariants, enforced at construction and preserved by every method:
/// the product of `shape` equals `data.len()`, every extent is positive,
/// and `grad` (when present) has a shape identical to the value tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Box<Tensor<S>>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n]).expect("zero tensor shape must be valid")
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("filled tensor shape must be valid")
    }

    /// Single-element tensor of shape `[1]`; the representation of scalars.
    pub fn scalar(value: S) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape is valid")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self::new(shape, data).expect("from_fn shape must be valid")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view of the elements. The shape cannot change through this.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&Tensor<S>> {
        self.grad.as_deref()
    }

    /// Attaches a gradient; its shape must match the value's shape.
    pub fn set_grad(&mut self, grad: Tensor<S>) -> Result<(), TensorError> {
        if grad.shape != self.shape {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                left: self.shape.clone(),
                right: grad.shape.clone(),
            });
        }
        self.grad = Some(Box::new(grad));
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Flat offset of a multi-index. Panics on rank or range violations;
    /// intended for tests and small reference code, not hot loops.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    /// Same values reinterpreted under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    /// Lossy precision conversion (used to move between the f32 storage
    /// format and f64 gradient-check arithmetic).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| T::from_f64(v.into_f64()))
                .collect(),
        )
        .expect("cast preserves shape/length")
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }
}
