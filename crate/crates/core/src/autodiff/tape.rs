use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Vector-Jacobian product of one node: maps the output gradient to one gradient per parent.
pub(crate) type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Nodes are appended in evaluation order, so the node list is always topologically sorted
/// and `backward` is a single reverse sweep.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    /// A differentiable leaf, e.g. a trainable parameter.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<Backward<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records an op output. The backward rule is dropped when no parent needs a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: Backward<T>,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let bw = requires_grad.then_some(backward);
        self.push(Rc::new(value), ids, bw, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates gradients from a one-element `loss` to every node on the tape.
    ///
    /// A tape can be swept once; call [`Tape::reset`] before sweeping again.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let (Some(bw), Some(g)) = (&node.backward, &grads[id]) else {
                continue;
            };
            let parent_grads = bw(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        self.backward_done.set(true);
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Re-arms the tape for another backward sweep.
    pub fn reset(&self) {
        self.backward_done.set(false);
    }
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
