//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! creation order, which is also a topological order: an operation's
//! inputs always precede it. [`Tape::backward`] walks the tape once in
//! reverse. Leaves created with [`Tape::param`] accumulate their gradient
//! across repeated backward calls until [`Tape::zero_grad`].
//!
//! The tape is built fresh for every training step and dropped afterwards.
//! Operations whose inputs carry no gradient record only their value, so a
//! forward pass over constants (inference) costs no closure storage.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: given the upstream gradient and a per-input "needs
/// gradient" mask, return one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    /// Accumulated gradient; present only on leaves with `requires_grad`.
    grad: Option<Tensor<T>>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
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

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape().to_vec()));
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad,
        })
    }

    /// Trainable leaf initialised from a copy of `value`.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        self.leaf(value.clone(), true)
    }

    /// Leaf that takes ownership of `value` and receives a gradient.
    pub fn param_owned(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records a derived value. `backward` is stored only when at least one
    /// input requires a gradient.
    pub fn record(&self, inputs: &[Var<'_, T>], value: Tensor<T>, backward: BackwardFn<T>) -> Var<'_, T> {
        let nodes = self.nodes.borrow();
        let requires_grad = inputs.iter().any(|v| {
            debug_assert!(std::ptr::eq(v.tape, self), "var from another tape");
            nodes[v.id].requires_grad
        });
        drop(nodes);
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            grad: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, `None` for anything else.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Propagates d(root)/d(node) to every trainable leaf, adding into the
    /// leaf accumulators.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut adjoint: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        adjoint[root.id] = Some(Tensor::ones(root_node.value.shape().to_vec()));
        let mut leaf_updates = Vec::new();

        for id in (0..=root.id).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => leaf_updates.push((id, g)),
                Some(rule) => {
                    let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let grads = rule(&g, &needs);
                    debug_assert_eq!(grads.len(), node.inputs.len());
                    for ((&input, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                        let Some(gi) = gi else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(gi.shape(), nodes[input].value.shape(), "grad shape for node {input}");
                        match adjoint[input].as_mut() {
                            Some(acc) => acc.add_assign(&gi),
                            None => adjoint[input] = Some(gi),
                        }
                    }
                }
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            if let Some(acc) = nodes[id].grad.as_mut() {
                acc.add_assign(&g);
            }
        }
        Ok(())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}
