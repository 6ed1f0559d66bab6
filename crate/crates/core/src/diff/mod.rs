//! Small reverse-mode automatic differentiation tape over `ndarray`.
//!
//! Values are eagerly computed `ArrayD<f64>` tensors; every operation pushes
//! a node whose backward closure turns the upstream gradient into gradients
//! for its parents. Nodes are topologically ordered by construction, so the
//! backward sweep is a single reverse pass. Gradient accumulation follows
//! the fixed node order and each closure reduces in deterministic order, so
//! traces are bitwise reproducible at any thread count.

pub mod field_ops;
pub mod nn;
pub mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct BackOp {
    parents: Vec<Var>,
    run: BackwardFn,
}

struct Node {
    value: Rc<ArrayD<f64>>,
    needs_grad: bool,
    back: Option<BackOp>,
}

/// Gradient store returned by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Wengert list of eagerly evaluated tensors.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Tape values are kept in standard layout so bulk kernels can take
    /// flat slices without copying.
    fn standardize(value: ArrayD<f64>) -> ArrayD<f64> {
        if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push_node(Node {
            value: Rc::new(Self::standardize(value)),
            needs_grad: true,
            back: None,
        })
    }

    /// Non-trainable input; no gradient is ever propagated into it.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push_node(Node {
            value: Rc::new(Self::standardize(value)),
            needs_grad: false,
            back: None,
        })
    }

    pub fn scalar_constant(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().expect("non-empty")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Register an operation node. `backward` receives the upstream gradient
    /// and returns one optional gradient per parent, in parent order.
    pub(crate) fn push_op(
        &self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push_node(Node {
            value: Rc::new(Self::standardize(value)),
            needs_grad: needs,
            back: needs.then_some(BackOp {
                parents,
                run: backward,
            }),
        })
    }

    /// Reverse sweep from a scalar root. Gradients of interior nodes are
    /// freed as soon as they have been consumed; leaf gradients survive in
    /// the returned store.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward requires a scalar root"
        );
        let mut slots: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for id in (0..=root.0).rev() {
            if slots[id].is_none() {
                continue;
            }
            let Some(back) = nodes[id].back.as_ref() else {
                continue;
            };
            let grad = slots[id].take().expect("checked above");
            let parent_grads = (back.run)(&grad);
            debug_assert_eq!(parent_grads.len(), back.parents.len());
            for (p, pg) in back.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.raw_dim(), nodes[p.0].value.raw_dim());
                match &mut slots[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { slots }
    }
}
