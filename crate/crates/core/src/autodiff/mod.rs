//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Every value is a 2-D `f64` matrix. A [`Tensor`] is a cheap handle to a node
//! in a computation graph; operations build new nodes that remember their
//! parents, and [`backward`] walks the graph in reverse topological order.
//!
//! Graphs are single-threaded (`Rc`-based). Independent graphs can live on
//! different threads, but a tensor never crosses a thread boundary.
//!
//! Gradients on leaf tensors accumulate across backward passes until
//! [`Tensor::zero_grad`] is called.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::{grad_check, relative_error};
pub use ops::{elementwise_max_set, log_softmax_rows, softmax_rows, sum_set};
pub use optim::{zero_grads, Sgd};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;

use crate::error::{bail, Result};

pub type Matrix = Array2<f64>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Provenance of a tensor: the operation that produced it and its inputs.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    /// Row-vector bias broadcast over every row of the first operand.
    AddBias(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Exp(Tensor),
    /// `ln(x + eps)`
    LnEps(Tensor, f64),
    Softmax(Tensor, f64),
    LogSoftmax(Tensor, f64),
    /// Per-cell maximum over a set, with the winning member index per cell.
    MaxSet(Vec<Tensor>, Vec<usize>),
    SumSet(Vec<Tensor>),
    /// Divide each row by the matching entry of a column vector.
    DivRows(Tensor, Tensor),
    RowSums(Tensor),
    Sum(Tensor),
    Mean(Tensor),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LnEps(..) => "ln_eps",
            Op::Softmax(..) => "softmax_rows",
            Op::LogSoftmax(..) => "log_softmax_rows",
            Op::MaxSet(..) => "elementwise_max_set",
            Op::SumSet(..) => "sum_set",
            Op::DivRows(..) => "div_rows",
            Op::RowSums(..) => "row_sums",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::DivRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LnEps(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::RowSums(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::MaxSet(set, _) | Op::SumSet(set) => set.iter().collect(),
        }
    }
}

struct Node {
    id: usize,
    value: RefCell<Matrix>,
    grad: RefCell<Option<Matrix>>,
    op: Op,
    requires_grad: bool,
}

/// Handle to a node in a computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("op", &self.0.op.name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub(crate) fn from_op(value: Matrix, op: Op) -> Tensor {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            op,
            requires_grad,
        }))
    }

    fn leaf(value: Matrix, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            op: Op::Leaf,
            requires_grad,
        }))
    }

    /// Leaf that is treated as data: no gradient is ever accumulated on it.
    pub fn constant(value: Matrix) -> Tensor {
        Tensor::leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(value: Matrix) -> Tensor {
        Tensor::leaf(value, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Array2::from_elem((1, 1), v))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.value.borrow().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Name of the operation that produced this tensor.
    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    pub fn value(&self) -> Ref<'_, Matrix> {
        self.0.value.borrow()
    }

    pub fn to_array(&self) -> Matrix {
        self.0.value.borrow().clone()
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// Overwrite the value of a leaf in place (optimizer steps, finite differences).
    pub fn set_value(&self, value: Matrix) -> Result<()> {
        if !self.is_leaf() {
            bail!(State, "cannot overwrite the value of a non-leaf tensor ({})", self.op_name());
        }
        if value.dim() != self.shape() {
            bail!(Shape, "set_value: expected {:?}, got {:?}", self.shape(), value.dim());
        }
        *self.0.value.borrow_mut() = value;
        Ok(())
    }

    pub(crate) fn update_value(&self, f: impl FnOnce(&mut Matrix)) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Matrix> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Matrix>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// New leaf sharing this tensor's current value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> usize {
        self.0.id
    }
}

/// Nodes reachable from `root` through gradient-carrying edges, parents first.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.0.op.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Reverse-mode sweep from a scalar root.
///
/// Leaf gradients accumulate additively across calls; interior nodes hold the
/// gradient from the most recent sweep.
pub fn backward(root: &Tensor) -> Result<()> {
    if root.shape() != (1, 1) {
        bail!(InvalidArgument, "backward needs a 1x1 root, got {:?}", root.shape());
    }
    if !root.requires_grad() {
        return Ok(());
    }
    let order = topo_order(root);
    let mut pending: HashMap<usize, Matrix> = HashMap::with_capacity(order.len());
    pending.insert(root.id(), Array2::ones((1, 1)));

    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.id()) else {
            continue;
        };
        if node.is_leaf() {
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
            continue;
        }
        let parent_grads = ops::vjp(node, &g);
        *node.0.grad.borrow_mut() = Some(g);
        for (parent, pg) in node.0.op.parents().into_iter().zip(parent_grads) {
            if !parent.requires_grad() {
                continue;
            }
            let Some(pg) = pg else { continue };
            match pending.get_mut(&parent.id()) {
                Some(acc) => *acc += &pg,
                None => {
                    pending.insert(parent.id(), pg);
                }
            }
        }
    }
    Ok(())
}

/// Number of nodes reachable from `root` through gradient-carrying edges.
pub fn graph_size(root: &Tensor) -> usize {
    topo_order(root).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_param_gives_ones() {
        let x = Tensor::param(array![[1.0, -2.0], [3.0, 4.0]]);
        backward(&x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), Array2::ones((2, 2)));
    }

    #[test]
    fn mean_square_gives_two_x_over_n() {
        let x = Tensor::param(array![[1.0, -2.0, 0.5]]);
        let loss = x.mul(&x).unwrap().mean();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.value().iter()) {
            assert!((gi - 2.0 * xi / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(array![[2.0]]);
        let loss = x.scale(3.0).sum();
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap()[[0, 0]], 6.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::param(array![[1.0, 2.0]]);
        assert!(matches!(backward(&x), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // f = sum(x * x + x), df/dx = 2x + 1
        let x = Tensor::param(array![[1.5, -0.5]]);
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&x).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), array![[4.0, 0.0]]);
    }

    #[test]
    fn constants_never_receive_grad() {
        let c = Tensor::constant(array![[1.0, 2.0]]);
        let x = Tensor::param(array![[3.0, 4.0]]);
        backward(&c.mul(&x).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), array![[1.0, 2.0]]);
    }

    #[test]
    fn topo_order_puts_parents_first() {
        let x = Tensor::param(array![[1.0]]);
        let y = x.exp();
        let z = y.add(&x).unwrap();
        let root = z.sum();
        let order = topo_order(&root);
        let pos = |t: &Tensor| order.iter().position(|n| n.ptr_eq(t)).unwrap();
        assert!(pos(&x) < pos(&y));
        assert!(pos(&y) < pos(&z));
        assert!(pos(&z) < pos(&root));
        assert_eq!(graph_size(&root), 4);
    }

    #[test]
    fn set_value_only_on_leaves() {
        let x = Tensor::param(array![[1.0]]);
        let y = x.exp();
        assert!(y.set_value(array![[0.0]]).is_err());
        assert!(x.set_value(array![[0.0, 1.0]]).is_err());
        x.set_value(array![[5.0]]).unwrap();
        assert_eq!(x.item(), 5.0);
    }
}
