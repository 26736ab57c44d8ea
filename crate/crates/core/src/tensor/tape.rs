//! Operation tape for reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends one node holding its output value,
//! its parent ids and the rule that maps an output gradient back onto the
//! parents. Node ids grow monotonically, so the node list is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::value::Tensor;
use crate::error::{Error, Result};

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are only accumulated for leaves with
    /// `requires_grad` and for nodes that depend on one.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.record(value, Vec::new(), Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor, parents: Vec<usize>, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.record(value, parents, op, requires_grad)
    }

    fn record(&self, value: Tensor, parents: Vec<usize>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates gradients from a scalar `loss` to every node that
    /// requires them. May be called once until [`Tape::reset_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.backward_done.set(true);
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }

        let mut pending: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let grad = Tensor::new(node.value.shape(), g).expect("gradient shape");
            if !node.parents.is_empty() {
                let inputs: Vec<Rc<Tensor>> = node
                    .parents
                    .iter()
                    .map(|&p| Rc::clone(&nodes[p].value))
                    .collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let parent_grads = node.op.backward(&grad, &node.value, &inputs, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else {
                        continue;
                    };
                    debug_assert_eq!(pg.len(), nodes[p].value.numel());
                    match &mut pending[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            nodes[id].grad = Some(grad);
        }

        for node in nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    pub fn reset_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
        self.backward_done.set(false);
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient after [`Tape::backward`]; `None` before it or when the
    /// node does not require gradients.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}
