use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule of a recorded operation.
///
/// Receives the upstream gradient (same dims as the op output) and a mask of
/// which inputs need a gradient; returns one entry per input, in input order.
/// Entries for inputs that were not requested may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Tensor<T>>,
}

/// Dynamic record of one forward pass.
///
/// Node ids are assigned in creation order, so every operation's inputs
/// precede it and reverse id order is a valid topological order. A tape is
/// single-threaded; run independent tapes on separate workers.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        value.ensure_finite("leaf")?;
        Ok(self.push(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        }))
    }

    /// Trainable leaf: receives a gradient on [`Var::backward`].
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient (data, targets).
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, false)
    }

    /// Records an operation with an explicit backward rule.
    ///
    /// This is the extension point every differentiable op in the crate is
    /// built on. The output is rejected if it contains a non-finite value.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        value.ensure_finite(op)?;
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "{op}: input from another tape");
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            grad: None,
        }))
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root_dims = nodes[root].value.dims().to_vec();
        if !root_dims.is_empty() {
            return Err(Error::Contract(format!(
                "backward root must be rank-0, got dims {root_dims:?}"
            )));
        }
        if !nodes[root].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::ones(&[]));
        for id in (0..=root).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            let rule = {
                let node = &mut nodes[id];
                node.grad = Some(upstream);
                node.backward.take()
            };
            let Some(rule) = rule else { continue };
            let node = &nodes[id];
            let op = node.op;
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let grads = rule(node.grad.as_ref().expect("set above"), &needs);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{op}: gradient count");
            for ((&input, grad), need) in node.inputs.iter().zip(grads).zip(needs) {
                let Some(grad) = grad else { continue };
                if !need {
                    continue;
                }
                if grad.dims() != nodes[input].value.dims() {
                    return Err(Error::Contract(format!(
                        "{op}: backward produced gradient dims {:?} for input dims {:?}",
                        grad.dims(),
                        nodes[input].value.dims()
                    )));
                }
                grad.ensure_finite(op)?;
                match &mut pending[input] {
                    Some(acc) => acc.accumulate(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last [`Var::backward`], if this node was
    /// reached from the root.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Reverse sweep from this rank-0 node. Gradients reaching a node along
    /// several paths are summed. Backward rules are consumed, so a tape
    /// supports one sweep.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }
}
