//! Eager recording tape and reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use super::{DenseArray, DiffError};

/// Computes parent adjoints from a node's adjoint. The flag slice tells the
/// rule which parents actually need a gradient; entries for the others may be
/// `None`.
pub(crate) type BackwardRule = Box<dyn Fn(&DenseArray, &[bool]) -> Vec<Option<DenseArray>>>;

struct Node {
    value: Arc<DenseArray>,
    parents: Vec<usize>,
    backward: Option<BackwardRule>,
    requires_grad: bool,
}

/// Record-as-you-execute tape. One tape per training step; drop it after
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
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

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&self, value: DenseArray) -> Var<'_> {
        self.push_raw(Arc::new(value), Vec::new(), None, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push_raw(Arc::new(value), Vec::new(), None, false)
    }

    /// Constant sharing an existing buffer.
    pub fn constant_shared(&self, value: Arc<DenseArray>) -> Var<'_> {
        self.push_raw(value, Vec::new(), None, false)
    }

    /// Registers an operation with a user-supplied vector-Jacobian product.
    ///
    /// `vjp` maps the output adjoint to one adjoint per parent, in order, each
    /// shaped like that parent's value.
    pub fn custom<'t, F>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t>],
        value: DenseArray,
        vjp: F,
    ) -> Result<Var<'t>, DiffError>
    where
        F: Fn(&DenseArray) -> Vec<DenseArray> + 'static,
    {
        let shapes: Vec<Vec<usize>> = parents.iter().map(|p| p.shape()).collect();
        let rule: BackwardRule = Box::new(move |g, _needs| {
            let grads = vjp(g);
            assert_eq!(grads.len(), shapes.len(), "custom vjp arity");
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(gr, s)| {
                    assert_eq!(gr.shape(), s.as_slice(), "custom vjp shape");
                    Some(gr)
                })
                .collect()
        });
        self.record(op, parents, value, rule)
    }

    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t>],
        value: DenseArray,
        rule: BackwardRule,
    ) -> Result<Var<'t>, DiffError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(DiffError::NonFinite { op });
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(rule);
        Ok(self.push_raw(Arc::new(value), ids, backward, requires_grad))
    }

    fn push_raw(
        &self,
        value: Arc<DenseArray>,
        parents: Vec<usize>,
        backward: Option<BackwardRule>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<DenseArray> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar root. Node ids are issued in creation
    /// order, which is a topological order, so a single descending pass
    /// visits every node after all of its consumers.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<DenseArray>> = vec![None; nodes.len()];
        adjoints[root.id] = Some(DenseArray::ones(root_value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(adj) = adjoints[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let grads = rule(&adj, &needs);
            for ((&p, g), need) in node.parents.iter().zip(grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut adjoints[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            adjoints[id] = Some(adj);
        }
        Ok(Gradients { adjoints })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&DenseArray> {
        self.adjoints.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when no path reaches it.
    pub fn wrt(&self, var: Var<'_>) -> DenseArray {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(&var.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<DenseArray> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_shared(self.value())
    }
}
