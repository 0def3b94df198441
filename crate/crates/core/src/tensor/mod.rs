//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node in a computation
//! graph. Operations that receive at least one input requiring gradients
//! record their inputs and a [`BackwardOp`]; [`backward`] walks the graph
//! from a scalar root and returns a fresh [`Gradients`] store per call.

mod autograd;
mod conv;
mod norm;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

pub use autograd::{backward, Gradients};
pub use conv::{conv_output_len, conv_transpose_output_len};
pub use norm::{BatchStats, DEFAULT_NORM_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// Vector-Jacobian product of one recorded operation.
pub trait BackwardOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per parent (same order as recorded), or `None`
    /// for a parent that receives no gradient from this op.
    fn backward(&self, parents: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

struct Node<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    op: Option<Box<dyn BackwardOp<T>>>,
}

pub struct Tensor<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("id", &self.0.id).field("shape", &self.0.shape);
        if let Some(op) = &self.0.op {
            d.field("op", &op.name());
        }
        if self.0.data.len() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(invalid(
                "tensor",
                format!("{} values do not fill shape {shape:?}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            op: None,
        })))
    }

    /// Constant tensor; never receives a gradient.
    pub fn new(data: Vec<T>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::leaf(data, shape.into(), false)
    }

    /// Trainable leaf; [`backward`] reports its gradient.
    pub fn param(data: Vec<T>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::leaf(data, shape.into(), true)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        Self::leaf(vec![T::zero(); numel(&shape)], shape, false).expect("zeros are finite")
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(vec![v], Vec::new())
    }

    pub fn from_f64(values: &[f64], shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    /// Records the result of an operation. Parents and the backward op are
    /// kept only if some parent participates in differentiation.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), numel(&shape));
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, op): (_, Option<Box<dyn BackwardOp<T>>>) = if requires_grad {
            (parents, Some(Box::new(op)))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            op,
        })))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: false,
            parents: Vec::new(),
            op: None,
        }))
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.0.parents
    }

    pub(crate) fn op(&self) -> Option<&dyn BackwardOp<T>> {
        self.0.op.as_deref()
    }

    /// Dimensions of a 4-D `[B, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape() {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => Err(invalid(op, format!("expected a 4-D tensor, got {s:?}"))),
        }
    }
}

/// Keeps the listed indices (in the given order) along `axis` of a
/// row-major array with `shape`. Returns the new data and shape.
pub fn select_axis<T: Copy>(data: &[T], shape: &[usize], axis: usize, keep: &[usize]) -> (Vec<T>, Vec<usize>) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            assert!(k < len, "index {k} out of range for axis of length {len}");
            let start = (o * len + k) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    (out, new_shape)
}
