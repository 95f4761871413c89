use std::cell::RefCell;

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule: given the output gradient and a mask of which parents need
/// a gradient, returns one optional contribution per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Recording of one forward computation. Owned by a single thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|p| nodes[p.id].needs_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Registers every parameter of `store` as a leaf. Frozen parameters are
    /// bound as constants.
    pub fn bind<'g>(&'g self, store: &ParamStore) -> Bound<'g> {
        let vars = store
            .iter()
            .map(|p| self.leaf(p.tensor.clone(), p.trainable))
            .collect();
        Bound { vars }
    }

    /// Binds every parameter as a constant; no gradient bookkeeping.
    pub fn bind_frozen<'g>(&'g self, store: &ParamStore) -> Bound<'g> {
        let vars = store.iter().map(|p| self.leaf(p.tensor.clone(), false)).collect();
        Bound { vars }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Node ids are assigned in creation order, so iterating ids downward is a
    /// valid reverse topological order. Contributions from repeated uses of a
    /// node accumulate additively.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(gout) = upper[0].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let contributions = backward(&gout, &mask);
            for (&parent, contrib) in node.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut lower[parent] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Parameters of a [`ParamStore`] bound into a graph, indexed by [`ParamId`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Gradients in store order; `None` for parameters the loss does not reach.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v)).collect()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads
            .get(var.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Gradient, or zeros when the loss does not depend on `var`.
    pub fn get_or_zero(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rank(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.rank()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().to_vec()
    }
}
