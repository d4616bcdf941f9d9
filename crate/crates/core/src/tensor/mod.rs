//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every operation returns a new immutable [`Tensor`]. When at least one input
//! requires a gradient (and recording is enabled, see [`no_grad`]) the result
//! keeps a reference to its parents together with a closure computing the
//! vector-Jacobian product. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into leaf tensors.
//!
//! Broadcasting is deliberately absent: binary ops accept either identical
//! shapes or a single-element operand. Anything else needs an explicit
//! reshape or one of the named trailing-axis ops.

mod autograd;
mod conv;
pub mod gradcheck;
mod norm;
mod ops;
pub mod serialize;

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use norm::BatchStats;
pub(crate) use ops::sigmoid;

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal. Values outside the range become infinities.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(bytes);
        f32::from_le_bytes(b)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(bytes);
        f64::from_le_bytes(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: non-finite value in result (numeric overflow)")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording differentiation history on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product: receives the upstream gradient and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub type BackwardFn<F> = Box<dyn Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>> + Send + Sync>;

struct GradFn<F: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<F>>>,
    grad_fn: Option<GradFn<F>>,
}

impl<F: Scalar> Drop for Node<F> {
    // Unlinks long parent chains iteratively so deep graphs cannot overflow the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<F>> = match self.grad_fn.take() {
            Some(g) => g.parents,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                if let Some(g) = node.grad_fn.take() {
                    stack.extend(g.parents);
                }
            }
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Immutable n-dimensional array, optionally tracked for differentiation.
pub struct Tensor<F: Scalar> {
    node: Arc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &F::DTYPE)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &op)
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    fn build(shape: Vec<usize>, data: Arc<Vec<F>>, requires_grad: bool, grad_fn: Option<GradFn<F>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("expected {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn parameter(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.node.shape.clone(), Arc::clone(&t.node.data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![F::zero(); numel(shape)]), false, None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, None)
    }

    pub fn scalar(value: F) -> Self {
        Self::full(&[1], value)
    }

    /// Returns a leaf copy of this tensor with the given gradient flag, cut off from history.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.node.shape.clone(), Arc::clone(&self.node.data), requires_grad, None)
    }

    pub fn detach(&self) -> Self {
        self.detach_with_grad(false)
    }

    /// Builds the result of a custom differentiable operation.
    ///
    /// The backward closure is retained only if recording is enabled and some
    /// parent requires a gradient. Fails with [`TensorError::NonFinite`] when
    /// `data` contains NaN or infinity.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        parents: &[&Tensor<F>],
        backward: impl Fn(&[F], &[bool]) -> Vec<Option<Vec<F>>> + Send + Sync + 'static,
    ) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape { op, shape, reason: format!("result holds {} values", data.len()) });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward),
        });
        Ok(Self::build(shape, Arc::new(data), requires_grad, grad_fn))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.node.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the operation that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn same_node(&self, other: &Tensor<F>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }
}
