//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle onto a graph node. Every operation
//! allocates a fresh node holding the forward result plus a closure that
//! scatters the incoming gradient back into the operands, so a graph is
//! built implicitly by evaluating expressions. [`Tensor::backward`] walks
//! the recorded nodes once, newest first, and accumulates gradients into
//! every reachable node that tracks them.
//!
//! Conventions:
//! - data is immutable after construction; only gradient buffers mutate
//! - gradients accumulate across uses and across repeated backward calls,
//!   clear them explicitly with [`Tensor::zero_grad`]
//! - images are `[h, w, c]`, matrices `[rows, cols]`, row-major throughout
//! - shape mismatches are programming errors and panic with the op name
//!   and both shapes; fallible parsing and I/O return `Result`
//! - a graph lives on one thread; ops may parallelise internally but keep
//!   a fixed per-element reduction order, so results do not depend on the
//!   thread count

mod gradcheck;
mod ops;
mod snapshot;

pub use gradcheck::{check_gradients, grad_err, numeric_grad, GradReport};
pub use snapshot::{read_snapshot, read_snapshot_prefix, write_snapshot, SnapshotError};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Tag stored in tensor snapshots.
    const DTYPE: u8;
    /// Bytes per element in the snapshot encoding.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static PARALLEL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording backward edges. Forward values are unchanged.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Enables data-parallel inner loops in the heavy kernels. Off by default.
/// Each output element is owned by exactly one thread and reductions keep
/// their serial order, so results are bit-identical either way.
pub fn set_parallel(on: bool) {
    PARALLEL.with(|p| p.set(on));
}

pub(crate) fn parallel() -> bool {
    PARALLEL.with(|p| p.get())
}

/// Arguments handed to an op's backward closure.
pub(crate) struct Back<'a, T: Scalar> {
    /// Forward output of the node.
    pub out: &'a [T],
    /// Gradient of the loss with respect to the node output.
    pub grad: &'a [T],
    pub parents: &'a [Tensor<T>],
}

type BackFn<T> = Box<dyn Fn(&Back<'_, T>)>;

struct Edge<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    edge: Option<Edge<T>>,
}

/// Handle onto one node of the autodiff graph. Cloning shares the node.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, edge: Option<Edge<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                edge,
            }),
        }
    }

    /// Constant leaf; does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "from_vec: shape {:?} wants {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Self::new_node(shape.to_vec(), Rc::new(data), false, None)
    }

    /// Trainable leaf; gradients accumulate into it on backward.
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param: shape {:?} wants {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Self::new_node(shape.to_vec(), Rc::new(data), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![T::ZERO; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: BackFn<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let record = grad_enabled() && parents.iter().any(Tensor::tracked);
        let edge = record.then_some(Edge { parents, backward });
        Self::new_node(shape, Rc::new(data), false, edge)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.node.data)
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item: tensor has shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when backward will deposit a gradient here.
    pub(crate) fn tracked(&self) -> bool {
        self.node.requires_grad || self.node.edge.is_some()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same data, detached from the graph. No gradients flow through it.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_node(self.node.shape.clone(), self.data_rc(), false, None)
    }

    pub(crate) fn acc_grad(&self, f: impl FnOnce(&mut [T])) {
        if !self.tracked() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::ZERO; self.len()]);
        f(g);
    }

    /// Backpropagates from a scalar. Gradients add onto whatever is already
    /// stored, so call [`Tensor::zero_grad`] on the leaves between steps.
    pub fn backward(&self) {
        assert_eq!(
            self.len(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            self.shape()
        );
        self.acc_grad(|g| g[0] += T::ONE);

        // Child nodes always carry larger ids than their parents, so a
        // reverse id sort of the reachable set is a topological order.
        let mut order: Vec<Rc<Node<T>>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![Rc::clone(&self.node)];
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id) {
                continue;
            }
            if let Some(edge) = &n.edge {
                for p in &edge.parents {
                    if p.tracked() {
                        stack.push(Rc::clone(&p.node));
                    }
                }
            }
            order.push(n);
        }
        order.sort_by(|a, b| b.id.cmp(&a.id));

        for n in &order {
            let Some(edge) = &n.edge else { continue };
            let grad = n.grad.borrow();
            let Some(grad) = grad.as_deref() else { continue };
            (edge.backward)(&Back {
                out: &n.data,
                grad,
                parents: &edge.parents,
            });
        }
    }
}
