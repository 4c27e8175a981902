//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every op appends a node holding its output value
//! and enough information to route gradients back to its inputs. Graphs are
//! built fresh for every forward pass and are not shared between threads.

mod backward;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::bilinear_axis;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-execution operation counts, split the way the complexity model needs
/// them: matmul multiply-adds in one bucket, everything else kept apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    /// Multiply-adds performed by `matmul` (one per `a[i,p]·b[p,j]` term).
    pub matmul_macs: u64,
    /// Input elements summed by average pooling.
    pub pooling: u64,
    /// Output elements produced by elementwise ops, softmax, resizing and reductions.
    pub elementwise: u64,
}

impl FlopCounter {
    /// Floating-point operations attributed to matmuls (a multiply-add is two).
    pub fn matmul_flops(&self) -> u64 {
        2 * self.matmul_macs
    }

    pub fn since(&self, earlier: &FlopCounter) -> FlopCounter {
        FlopCounter {
            matmul_macs: self.matmul_macs - earlier.matmul_macs,
            pooling: self.pooling - earlier.pooling,
            elementwise: self.elementwise - earlier.elementwise,
        }
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.matmul_macs += other.matmul_macs;
        self.pooling += other.pooling;
        self.elementwise += other.elementwise;
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Pad2d {
        input: Var,
        top: usize,
        left: usize,
    },
    Crop2d {
        input: Var,
        top: usize,
        left: usize,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    AvgPool2d {
        input: Var,
        k: usize,
    },
    Bilinear(Var),
    Unfold {
        input: Var,
        size: usize,
        stride: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    VarLast(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: FlopCounter,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable node reachable
    /// from `loss` receives exactly one accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
