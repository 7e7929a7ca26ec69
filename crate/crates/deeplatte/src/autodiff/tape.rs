//! Operation tape and gradient propagation.

use std::cell::RefCell;

use super::{Tensor, TensorError};

/// Backward rule of a recorded node: maps the node's output gradient to
/// `(parent id, gradient contribution)` pairs.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub back: Option<BackwardFn>,
}

/// Records a computation for reverse-mode differentiation.
///
/// One tape serves one forward/backward pass and is single-threaded by
/// contract; independent tapes may live on independent threads.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        tune_allocator();
        Tape::default()
    }

    /// Registers a leaf (input or parameter). Leaves receive gradients but
    /// have no parents.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, None)
    }

    /// Registers a constant; identical to a leaf, named for intent at call sites.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, None)
    }

    pub(crate) fn push(&self, value: Tensor, back: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, back });
        Var { tape: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Propagates gradients from a scalar loss back to every reachable leaf.
    ///
    /// Nodes are visited in reverse recording order, which is a valid
    /// topological order; accumulation is a plain sum over all paths, so the
    /// result is deterministic.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(loss_value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(back) = nodes[id].back.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(grad) = grads[id].take() else {
                continue; // not on any path from the loss
            };
            for (parent, contribution) in back(&grad) {
                debug_assert!(parent < id, "tape parents must precede children");
                match &mut grads[parent] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    /// The forward value at this node (cheap clone of a shared buffer).
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of this node.
    pub fn item(&self) -> Result<f64, TensorError> {
        self.tape.nodes.borrow()[self.id].value.item()
    }
}

/// Keeps multi-megabyte conv buffers on the heap free lists instead of
/// round-tripping them through mmap/munmap on every window.
fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    });
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; zeros if the variable did not participate.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    /// True if `var` received any gradient from the loss.
    pub fn touched(&self, var: Var<'_>) -> bool {
        self.grads[var.id].is_some()
    }
}
