//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its value, its parents and a
//! closure that maps the output gradient to input gradients. Nodes are only
//! ever appended, so construction order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// What a backward closure sees for one node.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    pub output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: &'a [bool],
}

/// Returns one gradient slot per input, each shaped like that input.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    op: &'static str,
    scope: Rc<str>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    scope: RefCell<Option<Rc<str>>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
}

/// Handle to a node on a [`Tape`].
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

/// Label of a recorded node, for structural inspection of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub id: usize,
    pub op: &'static str,
    pub scope: Rc<str>,
    pub requires_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None, "constant")
    }

    /// A leaf that accumulates a gradient during [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Vec::new(), None, "leaf")
    }

    /// Records an operation computed outside this crate.
    ///
    /// `backward` is dropped when no input requires a gradient.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'t> {
        for v in inputs {
            assert!(std::ptr::eq(v.tape, self), "{op}: input belongs to another tape");
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        if cfg!(debug_assertions) && !value.is_finite() {
            let finite_inputs = inputs.iter().all(|v| v.value().is_finite());
            debug_assert!(!finite_inputs, "{op} produced non-finite values from finite inputs");
        }
        let parents = inputs.iter().map(|v| v.id).collect();
        self.push(value, requires_grad, parents, requires_grad.then_some(backward), op)
    }

    fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Var<'_> {
        let scope = self.scope.borrow().clone().unwrap_or_else(|| Rc::from(""));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
            op,
            scope,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs `f` with every new node labelled `scope`.
    pub fn scoped<R>(&self, scope: &str, f: impl FnOnce() -> R) -> R {
        let prev = self.scope.replace(Some(Rc::from(scope)));
        let out = f();
        *self.scope.borrow_mut() = prev;
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> Vec<NodeInfo> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| NodeInfo {
                id,
                op: n.op,
                scope: n.scope.clone(),
                requires_grad: n.requires_grad,
            })
            .collect()
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// one. A second call errors until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        if self.grads.borrow().is_some() {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let ctx = BackwardCtx {
                    grad: &g,
                    output: &node.value,
                    inputs: &inputs,
                    needs: &needs,
                };
                let input_grads = backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.parents.len(), "{}: arity", node.op);
                for ((&p, need), ig) in node.parents.iter().zip(needs).zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), nodes[p].value.numel(), "{}: grad size", node.op);
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient of the last backward pass; `None` before backward or when
    /// the loss does not depend on `var`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.as_ref()?.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape"))
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
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
