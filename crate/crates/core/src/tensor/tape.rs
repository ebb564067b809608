use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Backward rule: receives the upstream gradient and a per-parent flag saying
/// whether that parent needs a gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Real> {
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Ordered record of executed operations. Single-threaded by construction.
pub struct Tape<S: Real> {
    id: usize,
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Real> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: usize,
}

impl<S: Real> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("tape", &self.tape.id)
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Registers an input. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Result<Var<'_, S>> {
        value.check_finite("leaf")?;
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    pub fn param(&self, value: Tensor<S>) -> Result<Var<'_, S>> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<S>) -> Result<Var<'_, S>> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records the result of an operation. The backward rule is kept only when
    /// some parent needs a gradient.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        value: Tensor<S>,
        parents: &[Var<'_, S>],
        backward: F,
    ) -> Result<Var<'_, S>>
    where
        F: Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    {
        value.check_finite(op)?;
        for p in parents {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::ForeignTensor);
            }
        }
        let requires_grad = parents.iter().any(|p| self.requires_grad_of(p.id));
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignTensor);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), S::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.filter(|_| nodes[id].requires_grad))
            .collect();
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

/// Gradients of a loss with respect to the leaves of one tape.
pub struct Gradients<S> {
    tape_id: usize,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient for `var`; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        if var.tape.id != self.tape_id {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Result<Tensor<S>> {
        if var.tape.id != self.tape_id {
            return Err(Error::ForeignTensor);
        }
        Ok(self
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape())))
    }
}

impl<'t, S: Real> Var<'t, S> {
    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }
}
