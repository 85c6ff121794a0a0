//! Reverse-mode autodiff.
//!
//! A [`Var`] wraps a [`Tensor`] together with the operation that produced it.
//! Node ids increase monotonically per thread, so parents always carry smaller
//! ids than their children and a descending-id sweep is a valid reverse
//! topological order. Results of operations whose inputs are all untracked are
//! themselves untracked and keep no parents alive.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{ActError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: upstream gradient plus a per-parent "needs gradient" mask.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

enum Origin {
    Constant,
    Leaf { param: Option<usize> },
    Op { parents: Vec<Var>, backward: BackwardFn },
}

struct Node {
    id: u64,
    value: Tensor,
    origin: Origin,
}

/// A tensor participating (or not) in a computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("tracked", &self.tracked())
            .finish()
    }
}

impl Var {
    fn make(value: Tensor, origin: Origin) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            origin,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Self::make(value, Origin::Constant)
    }

    /// A differentiable input.
    pub fn leaf(value: Tensor) -> Var {
        Self::make(value, Origin::Leaf { param: None })
    }

    /// A differentiable input whose gradient is reported under `index`.
    pub fn param(value: Tensor, index: usize) -> Var {
        Self::make(value, Origin::Leaf { param: Some(index) })
    }

    /// Records an operation. The result is untracked when no parent is tracked.
    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(ActError::NonFinite(op));
        }
        if parents.iter().any(Var::tracked) {
            Ok(Self::make(value, Origin::Op { parents, backward }))
        } else {
            Ok(Self::constant(value))
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn tracked(&self) -> bool {
        !matches!(self.0.origin, Origin::Constant)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Drops the graph, keeping the value.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

/// Gradients produced by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<u64, Vec<f64>>,
    by_param: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a leaf, if it was reached from the loss.
    pub fn get(&self, var: &Var) -> Option<&[f64]> {
        self.by_node.get(&var.id()).map(Vec::as_slice)
    }

    /// Gradient of a leaf, zeros when it is not on a path to the loss.
    pub fn wrt(&self, var: &Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.value().numel()])
    }

    /// Gradient of the parameter registered under `index`.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.by_param.get(&index).map(Vec::as_slice)
    }

    pub fn into_params(self) -> HashMap<usize, Vec<f64>> {
        self.by_param
    }
}

fn accumulate(slot: &mut HashMap<u64, Vec<f64>>, id: u64, grad: Vec<f64>) {
    match slot.get_mut(&id) {
        Some(existing) => existing.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
        None => {
            slot.insert(id, grad);
        }
    }
}

/// Reverse-mode sweep from a scalar loss.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if !loss.tracked() {
        return Err(ActError::Usage(
            "backward called on a tensor that is not part of a graph".into(),
        ));
    }
    if loss.value().numel() != 1 {
        return Err(ActError::Usage(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }

    let mut order: Vec<Var> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.tracked() || !seen.insert(v.id()) {
            continue;
        }
        if let Origin::Op { parents, .. } = &v.0.origin {
            stack.extend(parents.iter().filter(|p| p.tracked()).cloned());
        }
        order.push(v);
    }
    order.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);
    let mut out = Gradients::default();

    for node in &order {
        let Some(grad) = pending.remove(&node.id()) else {
            continue;
        };
        match &node.0.origin {
            Origin::Constant => {}
            Origin::Leaf { param } => {
                if let Some(index) = param {
                    out.by_param.insert(*index, grad.clone());
                }
                out.by_node.insert(node.id(), grad);
            }
            Origin::Op { parents, backward } => {
                let needs: Vec<bool> = parents.iter().map(Var::tracked).collect();
                let grads = backward(&grad, &needs);
                debug_assert_eq!(grads.len(), parents.len());
                for ((parent, g), need) in parents.iter().zip(grads).zip(&needs) {
                    if let (true, Some(g)) = (*need, g) {
                        debug_assert_eq!(g.len(), parent.value().numel());
                        accumulate(&mut pending, parent.id(), g);
                    }
                }
            }
        }
    }
    Ok(out)
}
