use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the output gradient, the parent values, the output value, and a
/// flag per parent telling whether its gradient is needed. Returns one entry
/// per parent; `None` means no contribution.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<usize>,
    needs_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, which is already a topological
/// order, so the reverse sweep needs no sorting.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    gates: RefCell<Vec<GateAnchor>>,
    frozen: RefCell<Option<Vec<GateAnchor>>>,
}

/// Discrete decisions of one sparse attention layer: gate values, budgets
/// and the selected attention entries.
#[derive(Clone, Debug, PartialEq)]
pub struct GateAnchor {
    pub g: Vec<f64>,
    pub k_budget: Vec<usize>,
    /// Row-major `N×C×C` top-k selection.
    pub selection: Vec<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Makes the attention layers evaluated on this tape reuse the given
    /// budgets and selections and divide by the given gate values instead of
    /// their own.
    ///
    /// The gate factor `g/stop(g)` is constant in the forward pass, so its
    /// gradient has no finite-difference counterpart, and a top-k selection
    /// jumps wherever two logits tie. With decisions frozen at `θ₀` the
    /// factor becomes `g(θ)/g(θ₀)` and the mask a constant, a smooth function
    /// whose derivative at `θ₀` is exactly the gradient backward reports.
    pub fn freeze_gates(&self, anchors: Vec<GateAnchor>) {
        *self.frozen.borrow_mut() = Some(anchors);
    }

    /// Frozen decisions of the `i`-th attention layer, if any.
    pub fn frozen_gate(&self, i: usize) -> Option<GateAnchor> {
        self.frozen.borrow().as_ref().and_then(|a| a.get(i).cloned())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.borrow().is_some()
    }

    /// Number of attention layers recorded so far.
    pub fn gate_count(&self) -> usize {
        self.gates.borrow().len()
    }

    /// Records an attention layer's decisions; returns its index.
    pub fn log_gate(&self, anchor: GateAnchor) -> usize {
        let mut gates = self.gates.borrow_mut();
        gates.push(anchor);
        gates.len() - 1
    }

    /// Decisions of every attention layer evaluated so far.
    pub fn gate_log(&self) -> Vec<GateAnchor> {
        self.gates.borrow().clone()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor, param: Option<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            needs_grad: param.is_some(),
            param,
        });
        Var { tape: self, id }
    }

    /// Records a value that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, None)
    }

    /// Records parameter `id` of `store`; its gradient flows back on backward.
    pub fn param(&self, store: &ParamStore, id: usize) -> Var<'_> {
        self.leaf(store.get(id).value.clone(), Some(id))
    }

    /// Records a parameter by name.
    pub fn param_named(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        let id = store
            .id_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    pub(crate) fn push<'a>(
        &'a self,
        value: Tensor,
        parents: &[Var<'a>],
        backward: BackwardFn,
    ) -> Var<'a> {
        self.push_impl(value, parents.iter().map(|p| p.id).collect(), backward)
    }

    fn push_impl(&self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            param: None,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Reverse sweep from a scalar loss; adds ∂loss/∂param into each reached
    /// parameter's gradient buffer in `store`.
    ///
    /// The record is consumed: a second call fails with a lifecycle error.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different record".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Lifecycle(
                "backward already ran on this record".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                let p = store.get_mut(pid);
                if p.grad.shape() != g.shape() {
                    return Err(Error::Contract(format!(
                        "parameter {} does not match the recorded value",
                        p.name
                    )));
                }
                p.grad.add_assign(&g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = bw(&g, &inputs, &node.value, &needs);
            for ((&pid, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}
