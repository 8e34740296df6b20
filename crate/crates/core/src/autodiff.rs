//! Define-by-run reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation reads values
//! of strictly earlier nodes, so the node order is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! [`Tape::detach`] records a value-identical node whose `grad_blocked` flag
//! stops the sweep: whatever gradient arrives there is kept for inspection
//! but nothing is forwarded to its parent.
//!
//! ```
//! use hpsnet::{Tape, Tensor4};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor4::full((1, 1, 2, 2), 3.0));
//! let twice = tape.scale(x, 2.0);
//! let frozen = tape.detach(twice);
//! let y = tape.mul(x, frozen).unwrap();
//! let loss = tape.sum(y);
//!
//! let grads = tape.backward(loss).unwrap();
//! // d/dx sum(x * detach(2x)) = 2x, without the extra 2x from the detached branch.
//! assert!(grads.wrt(x).data().iter().all(|&g| g == 6.0));
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::tensor::{Shape4, Tensor4};

/// Position of a node on its tape.
pub type NodeId = usize;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

/// The operation a node was produced by, together with whatever the
/// backward rule needs beyond the parent values.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Detach,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Square,
    Relu,
    Clip { lo: f64, hi: f64 },
    Sum,
    Mean,
    SoftmaxChannels,
    Concat,
    SliceChannels { start: usize },
    Conv2d { stride: usize, padding: usize },
    ResizeNearest,
    AvgPool2,
    MulChannelBroadcast,
    SpatialMean,
    CrossEntropy(Arc<kernels::CrossEntropySaved>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Square => "square",
            Op::Relu => "relu",
            Op::Clip { .. } => "clip",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SoftmaxChannels => "softmax_channels",
            Op::Concat => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::ResizeNearest => "resize_nearest",
            Op::AvgPool2 => "avgpool_stride2",
            Op::MulChannelBroadcast => "mul_channel_broadcast",
            Op::SpatialMean => "spatial_mean",
            Op::CrossEntropy(_) => "cross_entropy",
        }
    }
}

/// One recorded operation.
#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: Op,
    pub parent_ids: Vec<NodeId>,
    pub value: Arc<Tensor4>,
    pub requires_grad: bool,
    /// Set on detach nodes; no gradient passes through to the parents.
    pub grad_blocked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers an existing shared value without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor4>, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            parent_ids: Vec::new(),
            value,
            requires_grad,
            grad_blocked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are accumulated for.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    /// Appends a node computed from `parents`. Gradients are tracked if any
    /// parent tracks them.
    pub(crate) fn record(&mut self, op: Op, parents: &[Var], value: Tensor4) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(TapeNode {
            op,
            parent_ids: parents.iter().map(|p| p.0).collect(),
            value: Arc::new(value),
            requires_grad,
            grad_blocked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value-identical copy of `x` that blocks gradient flow into `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(TapeNode {
            op: Op::Detach,
            parent_ids: vec![x.0],
            value,
            requires_grad: false,
            grad_blocked: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape4> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.record(Op::Add, &[a, b], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.record(Op::Sub, &[a, b], v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.record(Op::Mul, &[a, b], v))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|a| a * factor);
        self.record(Op::Scale(factor), &[x], v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.record(Op::Square, &[x], v)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor4::scalar(self.value(x).sum());
        self.record(Op::Sum, &[x], v)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor4::scalar(t.sum() / t.numel() as f64);
        self.record(Op::Mean, &[x], v)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a (1, 1, 1, 1) loss, got {loss_shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor4>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor4::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.grad_blocked || node.parent_ids.is_empty() {
                continue;
            }
            let Some(g) = grads[id].as_ref() else { continue };
            let need: Vec<bool> = node
                .parent_ids
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            if !need.iter().any(|&n| n) {
                continue;
            }
            let inputs: Vec<&Tensor4> = node.parent_ids.iter().map(|&p| &*self.nodes[p].value).collect();
            let parent_grads = vjp(&node.op, g, &inputs, &node.value, &need);
            for ((&p, pg), needed) in node.parent_ids.iter().zip(parent_grads).zip(need) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Ok(Gradients {
            shapes: self.nodes[..=loss.0].iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }
}

/// Vector-Jacobian products: given the upstream gradient `g` of a node,
/// returns the gradient contribution for each parent flagged in `need`.
fn vjp(op: &Op, g: &Tensor4, inputs: &[&Tensor4], out: &Tensor4, need: &[bool]) -> Vec<Option<Tensor4>> {
    let when = |i: usize, f: &dyn Fn() -> Tensor4| if need[i] { Some(f()) } else { None };
    match op {
        Op::Leaf | Op::Detach => vec![None; inputs.len()],
        Op::Add => vec![when(0, &|| g.clone()), when(1, &|| g.clone())],
        Op::Sub => vec![when(0, &|| g.clone()), when(1, &|| g.map(|x| -x))],
        Op::Mul => vec![
            when(0, &|| g.zip_map(inputs[1], |gi, b| gi * b)),
            when(1, &|| g.zip_map(inputs[0], |gi, a| gi * a)),
        ],
        Op::Scale(f) => vec![Some(g.map(|x| x * f))],
        Op::Square => vec![Some(g.zip_map(inputs[0], |gi, a| 2.0 * a * gi))],
        Op::Relu => vec![Some(g.zip_map(inputs[0], |gi, a| if a > 0.0 { gi } else { 0.0 }))],
        Op::Clip { lo, hi } => vec![Some(
            g.zip_map(inputs[0], |gi, a| if a > *lo && a < *hi { gi } else { 0.0 }),
        )],
        Op::Sum => vec![Some(Tensor4::full(inputs[0].shape(), g.item()))],
        Op::Mean => {
            let n = inputs[0].numel() as f64;
            vec![Some(Tensor4::full(inputs[0].shape(), g.item() / n))]
        }
        Op::SoftmaxChannels => vec![Some(kernels::softmax_channels_backward(g, out))],
        Op::Concat => {
            let ca = inputs[0].shape().c;
            let cb = inputs[1].shape().c;
            vec![
                when(0, &|| g.slice_channels(0, ca).expect("concat grad split")),
                when(1, &|| g.slice_channels(ca, cb).expect("concat grad split")),
            ]
        }
        Op::SliceChannels { start } => vec![Some(kernels::slice_channels_backward(g, inputs[0].shape(), *start))],
        Op::Conv2d { stride, padding } => {
            let (dx, dw, db) = kernels::conv2d_backward(g, inputs[0], inputs[1], *stride, *padding, need);
            vec![dx, dw, db]
        }
        Op::ResizeNearest => vec![Some(kernels::resize_nearest_backward(g, inputs[0].shape()))],
        Op::AvgPool2 => vec![Some(kernels::avgpool2_backward(g, inputs[0].shape()))],
        Op::MulChannelBroadcast => {
            let (dx, dm) = kernels::mul_channel_broadcast_backward(g, inputs[0], inputs[1], need);
            vec![dx, dm]
        }
        Op::SpatialMean => vec![Some(kernels::spatial_mean(g))],
        Op::CrossEntropy(saved) => vec![Some(kernels::cross_entropy_backward(g.item(), saved))],
    }
}

/// Result of [`Tape::backward`]: one dense gradient per node that received
/// any contribution.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
    shapes: Vec<Shape4>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialized as zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor4 {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor4::zeros(self.shapes.get(v.0).copied().unwrap_or_default()),
        }
    }

    /// Moves the gradient for `v` out of the map.
    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
