//! Dense row-major `f64` tensors with a dynamic reverse-mode autodiff graph.
//!
//! Every op that touches a tensor with `requires_grad` records its parents and
//! a vector-Jacobian closure. [`Tensor::backward`] walks the recorded graph in
//! reverse topological order and accumulates gradients into the leaves. The
//! graph is rebuilt on every forward pass; parameters are long-lived leaves
//! whose values only change through the optimizer.

mod gradcheck;
mod init;
mod ops;
mod optim;

pub use gradcheck::{central_difference, check_gradients, relative_error, GradReport};
pub use init::{normal, truncated_normal};
pub use ops::{cross_entropy, mse_loss};
pub use optim::{Adam, AdamConfig, AdamState};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

/// Shared handle to a node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if numel(shape) != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), values, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, values)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op: None,
        }))
    }

    /// Builds the output of an op. The backward closure is only kept when at
    /// least one parent is tracked.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel(&shape), values.len(), "{name}");
        let tracked = parents.iter().any(Tensor::requires_grad);
        let op = tracked.then(|| Op {
            name,
            parents,
            backward,
        });
        Tensor(Rc::new(Node {
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: Cell::new(tracked),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.values.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.values.borrow()[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.0.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.0.values.borrow()[flat]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Toggles tracking on a leaf. Used to freeze and unfreeze parameters.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.is_leaf(), "only leaves can be frozen or unfrozen");
        self.0.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Untracked copy of the current values.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    /// In-place update of a leaf's values; the optimizer's only write path.
    pub(crate) fn update_values<F: FnOnce(&mut [f64])>(&self, f: F) {
        assert!(self.is_leaf(), "values of op outputs are immutable");
        f(&mut self.0.values.borrow_mut());
    }

    pub(crate) fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot load {} values into shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.update_values(|v| v.copy_from_slice(values));
        Ok(())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into the
    /// `grad` slot of every tracked leaf reachable from `self`; calling this
    /// twice without zeroing doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 || self.rank() > 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.op {
                None => node.accumulate_grad(&g),
                Some(op) => {
                    let needs: Vec<bool> = op.parents.iter().map(Tensor::requires_grad).collect();
                    let parent_grads = (op.backward)(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), op.parents.len(), "{}", op.name);
                    for ((parent, pg), need) in op.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", op.name);
                        match pending.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes (parents before children).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
