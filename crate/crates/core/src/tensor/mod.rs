//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! Everything is `f64`. Graphs are built dynamically: each operation
//! allocates a node holding its value, its parents and a closure that maps
//! the output gradient to per-parent gradients. [`Tensor::backward`] walks
//! the graph once in reverse creation order and accumulates gradients for
//! every node that requires them.
//!
//! The engine is deliberately minimal: only the operations the enhancement
//! pipeline needs exist, and every backward rule is validated against
//! central finite differences in the test suites.

pub mod conv;
pub mod matmul;
pub mod movement;
pub mod ops;
pub mod resample;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Maps an output gradient to gradient contributions for each parent,
/// aligned with the node's parent list. `None` marks a parent that needs
/// no gradient (e.g. a constant).
pub(crate) type GradFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

pub(crate) struct Node {
    id: u64,
    value: ArrayD<f64>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

/// A value in the computation graph. Cheap to clone (reference counted).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_node(mut node: Node) -> Self {
        // Every stored value is standard (C) layout so reshape-based ops
        // can rely on contiguity.
        if !node.value.is_standard_layout() {
            node.value = node.value.as_standard_layout().to_owned();
        }
        Tensor { node: Rc::new(node) }
    }

    /// A constant: gradients never flow into it.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
        })
    }

    /// A leaf that accumulates gradients (parameters, gradient-check probes).
    pub fn leaf(value: ArrayD<f64>) -> Self {
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        })
    }

    pub fn scalar_const(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub(crate) fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, grad_fn: GradFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents,
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Extract the single element of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.node.value.len(), 1, "scalar() on non-scalar tensor");
        *self.node.value.iter().next().expect("non-empty")
    }

    /// Detach from the graph: same value, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.value.clone())
    }

    /// Reverse-mode sweep seeded with `d(self)/d(self) = 1`.
    ///
    /// `self` must hold exactly one element (a loss).
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.node.value.len(), 1, "backward() requires a scalar loss");
        self.backward_with(ArrayD::from_elem(IxDyn(self.shape()), 1.0))
    }

    /// Reverse-mode sweep with an explicit seed gradient.
    pub fn backward_with(&self, seed: ArrayD<f64>) -> Gradients {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        let mut grads: HashMap<u64, ArrayD<f64>> = HashMap::new();
        if !self.node.requires_grad {
            return Gradients { map: grads };
        }
        grads.insert(self.node.id, seed);

        // Reverse creation order is a valid topological order: every
        // operation is created after its parents.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.node.requires_grad || !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        for t in nodes {
            let Some(grad_fn) = t.node.grad_fn.as_ref() else { continue };
            let Some(out_grad) = grads.get(&t.node.id).cloned() else { continue };
            let parent_grads = grad_fn(&out_grad);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (parent, contrib) in t.node.parents.iter().zip(parent_grads) {
                if !parent.node.requires_grad {
                    continue;
                }
                let Some(contrib) = contrib else { continue };
                let contrib = if contrib.is_standard_layout() {
                    contrib
                } else {
                    contrib.as_standard_layout().to_owned()
                };
                debug_assert_eq!(
                    contrib.shape(),
                    parent.shape(),
                    "gradient shape mismatch for parent {}",
                    parent.node.id
                );
                grads
                    .entry(parent.node.id)
                    .and_modify(|acc| *acc += &contrib)
                    .or_insert(contrib);
            }
        }
        Gradients { map: grads }
    }
}

/// Gradients produced by a backward sweep, keyed by node id.
pub struct Gradients {
    map: HashMap<u64, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.map.get(&t.node.id)
    }

    pub fn take(&mut self, t: &Tensor) -> Option<ArrayD<f64>> {
        self.map.remove(&t.node.id)
    }
}
