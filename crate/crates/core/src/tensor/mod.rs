//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every operation whose inputs require gradients records a [`TapeNode`] on
//! the output. Nodes carry a monotonically increasing id, so sorting the
//! reachable nodes by descending id replays the tape in reverse forward
//! order. Gradients of leaves accumulate across [`Tensor::backward`] calls
//! until [`Tensor::zero_grad`] is called.
//!
//! Conventions worth knowing up front:
//! * `std_axis` uses the population (1/N) normalization.
//! * Reductions run in a fixed sequential order, so identical inputs give
//!   bitwise identical values and gradients.

mod gradcheck;
mod linalg;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use linalg::{cholesky, inverse_and_logdet, DEFAULT_JITTER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("backward called on a tensor that does not require grad")]
    Detached,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Inputs handed to a backward rule.
pub(crate) struct GradCtx<'a> {
    pub upstream: &'a [f64],
    pub output: &'a [f64],
    pub inputs: &'a [Tensor],
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&GradCtx) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// One recorded operation.
pub struct TapeNode {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

impl TapeNode {
    pub fn op(&self) -> &'static str {
        self.op
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<TapeNode>,
}

/// Shared handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node: None,
        })))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::build(shape.to_vec(), data, false)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::build(shape.to_vec(), data, true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), vec![value], false).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false).expect("valid shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::build(vec![n, n], data, false).expect("valid shape")
    }

    /// Build a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(data, &[rows.len(), cols])
    }

    /// Same values, as a fresh leaf with the given gradient flag.
    pub fn leaf(&self, requires_grad: bool) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), requires_grad)
            .expect("source tensor is valid")
    }

    /// Cut the tensor from the tape.
    pub fn detach(&self) -> Tensor {
        self.leaf(false)
    }

    /// Record the result of an operation.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| TapeNode {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Ok(Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        })))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn node(&self) -> Option<&TapeNode> {
        self.0.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Entry of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        assert_eq!(self.ndim(), 2);
        self.0.data[row * self.0.shape[1] + col]
    }

    /// Accumulated gradient of a leaf, if any has been written.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Nodes reachable from `self` that require grad, in forward (tape) order.
    pub fn tape(&self) -> Vec<Tensor> {
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || seen.contains_key(&t.id()) {
                continue;
            }
            if let Some(node) = t.node() {
                stack.extend(node.inputs.iter().cloned());
            }
            seen.insert(t.id(), t);
        }
        let mut order: Vec<Tensor> = seen.into_values().collect();
        order.sort_by_key(Tensor::id);
        order
    }

    /// Back-propagate from a scalar, accumulating into every reachable leaf
    /// that requires grad. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::Detached);
        }
        let order = self.tape();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(upstream) = pending.remove(&t.id()) else {
                continue;
            };
            match t.node() {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&upstream).for_each(|(a, g)| *a += g),
                        None => *slot = Some(upstream),
                    }
                }
                Some(node) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
                    let ctx = GradCtx {
                        upstream: &upstream,
                        output: t.data(),
                        inputs: &node.inputs,
                        needs: &needs,
                    };
                    let grads = (node.backward)(&ctx);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "op {}", node.op);
                    for (input, grad) in node.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel(), "op {}", node.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
