//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Graph`] is a per-forward-pass tape. Operations push a node only when at
//! least one input is tracked, so evaluation without gradients allocates no
//! tape and frees intermediates as soon as the caller drops them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Index of a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// A value flowing through the network, optionally tracked on a graph.
#[derive(Clone)]
pub struct Var {
    node: Option<NodeId>,
    value: Arc<Tensor4>,
}

impl Var {
    /// An untracked value; gradients never flow into it.
    pub fn constant(value: Tensor4) -> Self {
        Var {
            node: None,
            value: Arc::new(value),
        }
    }

    pub fn from_shared(value: Arc<Tensor4>) -> Self {
        Var { node: None, value }
    }

    pub fn value(&self) -> &Tensor4 {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor4> {
        Arc::clone(&self.value)
    }

    pub fn dims(&self) -> Dims {
        self.value.dims()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, {:?})", self.node, self.value)
    }
}

/// The backward rule of a recorded operation.
pub trait BackwardOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. `needs[i]` tells
    /// whether input `i` is tracked; entries for untracked inputs may be `None`.
    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>>;
}

struct Node {
    inputs: Vec<Option<NodeId>>,
    op: Option<Box<dyn BackwardOp>>,
    dims: Dims,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor4>>,
    recording: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A graph that never records; every value it produces is a constant.
    pub fn no_grad() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor4>, requires_grad: bool) -> Var {
        if !(self.recording && requires_grad) {
            return Var { node: None, value };
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            inputs: Vec::new(),
            op: None,
            dims: value.dims(),
        });
        Var {
            node: Some(id),
            value,
        }
    }

    /// Wraps an op output, recording `op` when any input is tracked.
    pub fn record(
        &mut self,
        inputs: &[&Var],
        output: Tensor4,
        op: impl BackwardOp + 'static,
    ) -> Result<Var> {
        self.record_shared(inputs, Arc::new(output), op)
    }

    /// Like [`Graph::record`] for outputs the op also keeps for backward.
    pub fn record_shared(
        &mut self,
        inputs: &[&Var],
        output: Arc<Tensor4>,
        op: impl BackwardOp + 'static,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !output.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Ok(Var::from_shared(output));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            op: Some(Box::new(op)),
            dims: output.dims(),
        });
        Ok(Var {
            node: Some(id),
            value: output,
        })
    }

    /// Propagates `seeds` (one gradient per output var) back to every leaf.
    ///
    /// Leaf gradients accumulate additively over all uses. Intermediate
    /// gradients are released as soon as their node has been processed.
    pub fn backward(&mut self, seeds: &[(&Var, Tensor4)]) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, seed) in seeds {
            if seed.dims() != var.dims() {
                return Err(Error::shape(
                    "backward",
                    format!("seed {} for output {}", seed.dims(), var.dims()),
                ));
            }
            if let Some(id) = var.node {
                accumulate(&mut grads[id.0], seed.clone());
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            // Taking the op releases its saved activations once processed.
            let Some(op) = self.nodes[idx].op.take() else {
                continue;
            };
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = op.backward(&grad_out, &needs)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                if let (Some(input), Some(g)) = (input, g) {
                    let expected = self.nodes[input.0].dims;
                    if g.dims() != expected {
                        return Err(Error::shape(
                            op.name(),
                            format!("backward produced {} for input {}", g.dims(), expected),
                        ));
                    }
                    if cfg!(debug_assertions) && !g.is_finite() {
                        return Err(Error::NonFinite { op: op.name() });
                    }
                    accumulate(&mut grads[input.0], g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`]. `None` when the leaf is
    /// untracked or unreachable from the seeded outputs.
    pub fn grad(&self, var: &Var) -> Option<&Tensor4> {
        var.node.and_then(|id| self.grads.get(id.0)?.as_ref())
    }

    pub fn take_grad(&mut self, var: &Var) -> Option<Tensor4> {
        var.node.and_then(|id| self.grads.get_mut(id.0)?.take())
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::scalar(3.0), true);
        let y = ops::mul(&mut g, &x, &x).unwrap();
        g.backward(&[(&y, Tensor4::scalar(1.0))]).unwrap();
        assert_eq!(g.grad(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_relu_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor4::from_vec(Dims::new(1, 1, 2, 1), vec![-1.0, 2.0]).unwrap(),
            true,
        );
        let r = ops::relu(&mut g, &x).unwrap();
        let s = ops::sum(&mut g, &r).unwrap();
        g.backward(&[(&s, Tensor4::scalar(1.0))]).unwrap();
        assert_eq!(g.grad(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::scalar(1.0), true);
        let y = ops::sum(&mut g, &x).unwrap();
        g.backward(&[(&y, Tensor4::scalar(1.0))]).unwrap();
        let err = g.backward(&[(&y, Tensor4::scalar(1.0))]).unwrap_err();
        assert!(matches!(err, Error::GraphConsumed));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::zeros(Dims::new(1, 1, 2, 1)), true);
        let y = ops::relu(&mut g, &x).unwrap();
        let err = g.backward(&[(&y, Tensor4::scalar(1.0))]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn reused_leaf_accumulates() {
        // y = x + 2x·x  →  dy/dx = 1 + 4x
        let mut g = Graph::new();
        let x = g.leaf(Tensor4::scalar(1.5), true);
        let sq = ops::mul(&mut g, &x, &x).unwrap();
        let sq2 = ops::scale(&mut g, &sq, 2.0).unwrap();
        let y = ops::add(&mut g, &x, &sq2).unwrap();
        g.backward(&[(&y, Tensor4::scalar(1.0))]).unwrap();
        assert_eq!(g.grad(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor4::scalar(2.0), true);
        let y = ops::mul(&mut g, &x, &x).unwrap();
        assert!(!y.requires_grad());
        assert!(g.is_empty());
        assert_eq!(y.value().data(), &[4.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = Var::constant(Tensor4::scalar(1.0));
        let b = Var::constant(Tensor4::scalar(2.0));
        let c = ops::add(&mut g, &a, &b).unwrap();
        assert!(!c.requires_grad());
        assert!(g.is_empty());
    }
}
