//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Every differentiable
//! operation records its inputs and a backward closure when at least one input
//! requires a gradient; [`Tensor::backward`] replays the recorded graph in
//! reverse topological order and accumulates (`+=`) gradients into the leaves.
//!
//! Layout is always contiguous row-major. There are no strided views: reshape
//! shares storage, every other layout change copies.

mod conv;
mod gradcheck;
mod loss;
mod ops;

pub use conv::{interpolate_bicubic, bicubic_matrix, PoolKind};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use ops::Activation;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Backward closure: given the upstream gradient and a mask of which inputs
/// need a gradient, return one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// Recorded operation: kind, inputs and the closure holding saved activations.
pub struct OpRecord {
    kind: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<OpRecord>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::dim("Tensor::new", format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor::leaf(Arc::new(data), shape.to_vec(), false))
    }

    fn leaf(data: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Node { shape, data, requires_grad, grad: Mutex::new(None), op: None }))
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn raw(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor::leaf(Arc::new(data), shape, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::raw(vec![v], vec![])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::raw(vec![v; numel(shape)], shape.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Fresh leaf sharing this tensor's values, with gradient tracking on.
    pub fn requires_grad(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), true)
    }

    /// Fresh leaf sharing this tensor's values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient, if any has been written.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Stable identity of the underlying node.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Kind of the operation that produced this tensor (`None` for leaves).
    pub fn op_kind(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.kind)
    }

    /// Inputs of the producing operation (empty for leaves).
    pub fn op_inputs(&self) -> &[Tensor] {
        self.0.op.as_ref().map(|op| op.inputs.as_slice()).unwrap_or(&[])
    }

    /// Build the output of a custom differentiable operation.
    ///
    /// The backward closure is only retained when some input tracks gradients.
    /// Non-finite outputs are rejected.
    pub fn from_op(
        kind: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(kind, format!("output shape {:?} vs {} values", shape, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: kind });
        }
        Ok(Tensor::from_op_unchecked(kind, Arc::new(data), shape, inputs, backward))
    }

    pub(crate) fn from_op_unchecked(
        kind: &'static str,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = inputs.iter().any(|t| t.tracks_grad());
        let op = requires_grad.then(|| OpRecord {
            kind,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Tensor(Arc::new(Node { shape, data, requires_grad, grad: Mutex::new(None), op }))
    }

    /// Nodes reachable from `self` that track gradients, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (node, next input to expand)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            let inputs = node.op_inputs();
            if next < inputs.len() {
                let child = inputs[next].clone();
                stack.push((node, next + 1));
                if child.tracks_grad() && seen.insert(child.id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every leaf
    /// that tracks them; callers reset between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let needs: Vec<bool> = op.inputs.iter().map(|t| t.tracks_grad()).collect();
                    let input_grads = (op.backward)(&g, &needs);
                    debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}", op.kind);
                    for ((input, gi), need) in op.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(gi) = gi else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel(), "{}", op.kind);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Visit every node reachable from `self` (each once), outputs first.
    pub fn visit_graph(&self, mut f: impl FnMut(&Tensor)) {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            f(&t);
            stack.extend(t.op_inputs().iter().cloned());
        }
    }

    /// Ids of gradient-tracking leaves that influence `self`.
    pub fn leaf_ids(&self) -> std::collections::HashSet<usize> {
        let mut out = std::collections::HashSet::new();
        self.visit_graph(|t| {
            if t.is_leaf() && t.tracks_grad() {
                out.insert(t.id());
            }
        });
        out
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("op", &self.op_kind())
            .field("requires_grad", &self.tracks_grad())
            .field("data[..8]", &preview)
            .finish()
    }
}

/// Split `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
