//! Dense tensors and the reverse-mode autodiff tape.
//!
//! A [`Tensor`] is a shaped, immutable, row-major buffer of `f32` or `f64`
//! values. All differentiable operations are methods on [`Tape`]; calling
//! them with tracked inputs records nodes that [`Tape::backward`] later
//! replays in reverse.

mod fd;
mod tape;

pub use fd::finite_diff_gradient;
pub use tape::{GradientMap, Gradients, NodeId, ReduceKind, Tape};

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{GnnError, Result};

/// Scalar element type of a [`Tensor`]: `f32` (training) or `f64`
/// (gradient checking). Mixing precisions is a compile-time error.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Uniform draw from the open interval (-a, a).
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, a: f64) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, a: f64) -> Self {
        Uniform::new(-(a as f32), a as f32).expect("valid range").sample(rng)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, a: f64) -> Self {
        Uniform::new(-a, a).expect("valid range").sample(rng)
    }
}

/// Shaped numeric array in row-major order.
///
/// Tensors are immutable after construction; clones share the underlying
/// buffer. A tensor may carry a [`NodeId`] linking it to the tape node
/// that produced it.
#[derive(Clone)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GnnError::Dimension(format!(
                "shape {:?} implies {} elements but buffer holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            node: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
            requires_grad: false,
            node: None,
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self {
            shape: vec![n, n],
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    /// Entries drawn i.i.d. from the standard normal distribution.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::sample_standard_normal(rng)).collect();
        Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    /// Marks the tensor as a differentiation target.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
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

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Stable identity of the underlying buffer; used by the tape to
    /// recognize a parameter reused across operations.
    pub(crate) fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Element of a rank-2 tensor at (row, col).
    pub fn at(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same buffer, new shape with identical element count. The view is
    /// detached; see [`Tape::reshape`] for the tracked variant.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(GnnError::Dimension(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        })
    }

    /// Detached copy: same values, no grad flag, no tape link.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on unequal shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.numel() <= 16 {
            write!(f, "{:?}", &self.data[..])
        } else {
            write!(f, "[{} elements]", self.numel())
        }
    }
}
