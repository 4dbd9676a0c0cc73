//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns its values; gradients are accumulated into the tensor
//! itself. Operations are recorded on a [`Tape`], which is built fresh for
//! each forward pass and discarded after [`Tape::backward`]. Leaves (inputs,
//! parameters) live across tapes; everything produced by an op belongs to
//! the tape that produced it.

mod conv;
mod gradcheck;
mod norm;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: shapes {left} and {right} do not broadcast")]
    BroadcastMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: duplicate axis {axis}")]
    DuplicateAxis { op: &'static str, axis: usize },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("conv: kernel {kernel} larger than padded input {input}")]
    KernelTooLarge { kernel: String, input: String },
    #[error("batchnorm: degenerate batch ({count} value(s) per channel in train mode)")]
    DegenerateBatch { count: usize },
    #[error("adaptive_avg_pool: target {requested} invalid for input {available}")]
    PoolTarget { requested: String, available: String },
    #[error("backward: loss must be a scalar, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("backward: loss tensor is not on this tape")]
    LossNotOnTape,
    #[error("tensor: shape {shape} needs {expected} values, got {actual}")]
    DataLength {
        shape: String,
        expected: usize,
        actual: usize,
    },
    #[error("index_select: index {index} out of range for dim {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("{op}: expected rank {expected}, got {actual}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: operation needs at least one input")]
    EmptyInput { op: &'static str },
}

/// Whether batch statistics (train) or running statistics (eval) drive
/// normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Renders a shape as `2x3x4`; the empty shape renders as `scalar`.
pub fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".to_string();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) struct Storage {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    /// Index of the tape node that produced this tensor, if any.
    pub(crate) node: Option<usize>,
}

/// Shared handle to a dense `f64` tensor. Cloning is cheap and aliases the
/// same storage, so parameters can be held by a model block and an optimizer
/// at the same time.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Storage>>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape_string(&shape),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self::from_storage(shape, data, false))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::from_storage(shape, vec![0.0; n], false)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::from_storage(shape, vec![1.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel_of(&shape);
        Self::from_storage(shape, vec![value; n], false)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self::from_storage(vec![], vec![value], false)
    }

    /// Samples each element uniformly from `[lo, hi)`.
    pub fn uniform<R: rand::Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_storage(shape, data, false)
    }

    pub(crate) fn from_storage(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Storage {
                shape,
                data,
                grad: None,
                requires_grad,
                node: None,
            })),
        }
    }

    /// Marks this tensor as needing a gradient and returns the same handle.
    pub fn with_grad(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copies the values out. Intended for inspection, not inner loops.
    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        let s = self.inner.borrow();
        if s.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape_string(&s.shape),
            });
        }
        Ok(s.data[0])
    }

    /// Copies the accumulated gradient out, if one exists.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replaces the values in place; the shape must match.
    pub fn set_data(&self, data: &[f64]) -> Result<(), TensorError> {
        let mut s = self.inner.borrow_mut();
        if data.len() != s.data.len() {
            return Err(TensorError::DataLength {
                shape: shape_string(&s.shape),
                expected: s.data.len(),
                actual: data.len(),
            });
        }
        s.data.copy_from_slice(data);
        Ok(())
    }

    /// Applies `f` to the raw values in place (used by the optimizer).
    pub fn update_data<F: FnOnce(&mut [f64])>(&self, f: F) {
        let mut s = self.inner.borrow_mut();
        f(&mut s.data);
    }

    /// True when both handles alias the same storage.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn borrow(&self) -> Ref<'_, Storage> {
        self.inner.borrow()
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut s = self.inner.borrow_mut();
        match &mut s.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => s.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn set_node(&self, idx: usize) {
        self.inner.borrow_mut().node = Some(idx);
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.inner.borrow().node
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &s.shape)
            .field("requires_grad", &s.requires_grad)
            .finish()
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
