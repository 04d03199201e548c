//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Each
//! recorded node keeps a backward closure that maps the gradient of its
//! output to gradients of its inputs; [`Tape::backward`] replays those
//! closures in reverse recording order, which is a valid topological order
//! because a node can only consume values that already exist.
//!
//! Nodes whose inputs do not require gradients store no closure, so
//! inference on a tape with constant leaves costs no more than plain
//! evaluation.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use elementwise::{broadcast_shape, elementwise, ElementwiseOp};
pub(crate) use linalg::gemm;
pub use linalg::matmul_reference;
pub use reduce::ReduceOp;
pub(crate) use shape::GATHER_ZERO;

type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
    kink_signature: u64,
    macs: u64,
}

/// The operation log of one forward evaluation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.inner.borrow().nodes.len())
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.input(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
            requires_grad,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an operation. `backward` receives the output gradient and a
    /// mask of which parents need a gradient, and returns one entry per parent.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[&Var],
        backward: F,
    ) -> Result<Var>
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        for p in parents {
            if !Rc::ptr_eq(&p.tape.inner, &self.inner) {
                return Err(Error::Graph(format!("`{op}` mixes values from two tapes")));
            }
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad);
        let id = self.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Ok(Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
            requires_grad,
        })
    }

    /// Folds branch decisions of nondifferentiable ops (relu sign, max
    /// argmax) into a fingerprint so finite-difference probes can detect
    /// that a perturbation crossed a kink.
    pub(crate) fn note_kinks(&self, bits: impl Iterator<Item = u64>) {
        let mut inner = self.inner.borrow_mut();
        let mut h = inner.kink_signature;
        for b in bits {
            h = (h ^ b).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(7);
        }
        inner.kink_signature = h;
    }

    pub fn kink_signature(&self) -> u64 {
        self.inner.borrow().kink_signature
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.inner.borrow_mut().macs += n;
    }

    /// Multiply-accumulates performed by conv and matmul ops so far.
    pub fn macs(&self) -> u64 {
        self.inner.borrow().macs
    }

    /// Propagates d(root)/d(leaf) to every differentiable leaf. Consumes the
    /// tape's backward rules.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&root.tape.inner, &self.inner) {
            return Err(Error::Graph("root belongs to another tape".into()));
        }
        if root.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Graph(
                "root does not depend on any differentiable leaf".into(),
            ));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Graph(
                "tape already consumed by a previous backward".into(),
            ));
        }
        inner.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(root.value.shape()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut inner.nodes[id];
            if node.parents.is_empty() {
                if node.requires_grad {
                    leaves.insert(id, g);
                }
                continue;
            }
            let Some(bw) = node.backward.take() else {
                continue;
            };
            let parents = node.parents.clone();
            let needs: Vec<bool> = parents
                .iter()
                .map(|&p| inner.nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &needs);
            for ((p, pg), need) in parents.into_iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, g) in &leaves {
            if !g.is_finite() {
                return Err(Error::Graph(format!("non-finite gradient at leaf #{id}")));
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value.data()[0]
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        self.value.clone()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    /// Gradient of `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, v: &Var) -> Tensor {
        self.by_id
            .get(&v.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.by_id.remove(&v.id)
    }
}
