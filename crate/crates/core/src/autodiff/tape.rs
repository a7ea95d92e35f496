use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::backward::{self, Eager, Recorder};
use super::op::{self, check_eps, ConvGeometry, Op, Routes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a [`Tape`]. Only meaningful on the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId {
    pub(crate) tape: usize,
    pub(crate) index: usize,
}

impl VarId {
    /// Position of the node on its tape, in creation order.
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<VarId>,
    pub value: Arc<Tensor>,
    pub requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Every node's inputs precede it, so the tape is acyclic by construction.
/// Reverse passes can themselves be recorded onto the tape (see
/// [`Tape::backward`]), which is what makes gradients differentiable.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Differentiable leaves can be targets of
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, differentiable: bool) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.append(Op::Leaf { differentiable }, Vec::new(), value, differentiable))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.leaf(value, false)
    }

    /// Value held by a node.
    ///
    /// # Panics
    ///
    /// Panics if `id` was issued by a different tape.
    pub fn value(&self, id: VarId) -> &Tensor {
        self.check(id).expect("VarId from a different tape");
        &self.nodes[id.index].value
    }

    /// Whether gradients can flow into this node from a differentiable leaf.
    pub fn requires_grad(&self, id: VarId) -> Result<bool> {
        self.check(id)?;
        Ok(self.nodes[id.index].requires_grad)
    }

    pub fn op_name(&self, id: VarId) -> Result<&'static str> {
        self.check(id)?;
        Ok(self.nodes[id.index].op.name())
    }

    pub(crate) fn check(&self, id: VarId) -> Result<()> {
        if id.tape == self.id && id.index < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::TapeMismatch { index: id.index })
        }
    }

    pub(crate) fn node(&self, id: VarId) -> &Node {
        &self.nodes[id.index]
    }

    pub(crate) fn node_value(&self, id: VarId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.index].value)
    }

    fn append(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor, requires_grad: bool) -> VarId {
        let id = VarId { tape: self.id, index: self.nodes.len() };
        self.nodes.push(Node { op, inputs, value: Arc::new(value), requires_grad });
        id
    }

    /// Evaluates `op` on the given nodes and appends the result.
    pub(crate) fn push(&mut self, op: Op, inputs: &[VarId]) -> Result<VarId> {
        for &i in inputs {
            self.check(i)?;
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &*self.nodes[i.index].value).collect();
            op.eval(&vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.index].requires_grad);
        Ok(self.append(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::Div, &[a, b])
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Transpose, &[a])
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Relu, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Sum, &[a])
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.push(Op::Scale(c), &[a])
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Square, &[a])
    }

    /// `1 / (a + eps)` elementwise; `eps` must be positive.
    pub fn reciprocal_shift(&mut self, a: VarId, eps: f64) -> Result<VarId> {
        check_eps(eps)?;
        self.push(Op::ReciprocalShift(eps), &[a])
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        self.push(Op::Log, &[a])
    }

    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.push(Op::Softmax { axis }, &[a])
    }

    pub fn reshape(&mut self, a: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        self.push(Op::Reshape(shape.into()), &[a])
    }

    /// `out[i] = a[routes[i]]`, or zero where the route is `None`.
    pub fn gather(&mut self, a: VarId, routes: Routes, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        self.push(Op::Gather { routes, shape: shape.into() }, &[a])
    }

    /// Adjoint of [`Tape::gather`]: `out[routes[i]] += a[i]`.
    pub fn scatter_add(&mut self, a: VarId, routes: Routes, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        self.push(Op::ScatterAdd { routes, shape: shape.into() }, &[a])
    }

    /// Non-overlapping max pooling over the last two axes of a `(C, H, W)` or
    /// `(N, C, H, W)` tensor.
    pub fn maxpool2d(&mut self, a: VarId, window: usize) -> Result<VarId> {
        self.check(a)?;
        let routes = op::maxpool_routes(&self.nodes[a.index].value, window)?;
        self.push(Op::MaxPool2d { window, routes }, &[a])
    }

    /// Cross-correlation of a `(C, H, W)` or `(N, C, H, W)` input with an
    /// `(O, C, KH, KW)` kernel, zero padded by `padding` on every side.
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, stride: usize, padding: usize) -> Result<VarId> {
        self.check(input)?;
        self.check(kernel)?;
        ConvGeometry::new(
            self.nodes[input.index].value.shape(),
            self.nodes[kernel.index].value.shape(),
            stride,
            padding,
        )?;
        self.push(Op::Conv2d { stride, padding }, &[input, kernel])
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `record` set, the reverse pass is appended to this tape as
    /// ordinary primitives, so the returned gradients can be differentiated
    /// again. Otherwise the arithmetic runs off-tape and only the results are
    /// registered, as constants.
    pub fn backward(&mut self, output: VarId, wrt: &[VarId], record: bool) -> Result<Vec<VarId>> {
        if record {
            let plan = backward::Plan::new(self, output, wrt)?;
            plan.run(&mut Recorder::new(self))
        } else {
            self.gradients(output, wrt)?.into_iter().map(|g| self.constant(g)).collect()
        }
    }

    /// Off-tape gradients of the scalar `output`, returned as plain tensors.
    pub fn gradients(&self, output: VarId, wrt: &[VarId]) -> Result<Vec<Tensor>> {
        let plan = backward::Plan::new(self, output, wrt)?;
        let grads = plan.run(&mut Eager::new(self))?;
        Ok(grads.into_iter().map(Arc::unwrap_or_clone).collect())
    }

    /// Re-evaluates every node from its recorded inputs and reports whether
    /// each reproduces its stored value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let vals: Vec<&Tensor> = node.inputs.iter().map(|i| &*self.nodes[i.index].value).collect();
            if !node.op.eval(&vals)?.bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
