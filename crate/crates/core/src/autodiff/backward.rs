//! Reverse pass.
//!
//! Reverse rules are written once, generically over a [`Backend`]. The
//! [`Recorder`] backend appends every step to the tape as ordinary nodes,
//! so the resulting gradients are themselves differentiable; the [`Eager`]
//! backend runs the same kernels off-tape. Both execute identical
//! floating-point operations in identical order, so their results agree
//! bit for bit.

use std::sync::Arc;

use super::op::{axis_reduce_routes, fill_routes, ConvGeometry, Op};
use super::tape::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) trait Backend {
    type Value: Clone;

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn constant(&mut self, value: Tensor) -> Result<Self::Value>;

    /// The forward value of a node already on the tape.
    fn forward(&self, id: VarId) -> Self::Value;
}

pub(crate) struct Recorder<'t> {
    tape: &'t mut Tape,
}

impl<'t> Recorder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Recorder { tape }
    }
}

impl Backend for Recorder<'_> {
    type Value = VarId;

    fn apply(&mut self, op: Op, inputs: &[&VarId]) -> Result<VarId> {
        let ids: Vec<VarId> = inputs.iter().map(|&&i| i).collect();
        self.tape.push(op, &ids)
    }

    fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.tape.constant(value)
    }

    fn forward(&self, id: VarId) -> VarId {
        id
    }
}

pub(crate) struct Eager<'t> {
    tape: &'t Tape,
}

impl<'t> Eager<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Eager { tape }
    }
}

impl Backend for Eager<'_> {
    type Value = Arc<Tensor>;

    fn apply(&mut self, op: Op, inputs: &[&Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| v.as_ref()).collect();
        let out = op.eval(&vals)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(Arc::new(out))
    }

    fn constant(&mut self, value: Tensor) -> Result<Arc<Tensor>> {
        Ok(Arc::new(value))
    }

    fn forward(&self, id: VarId) -> Arc<Tensor> {
        self.tape.node_value(id)
    }
}

/// Snapshot of a node taken before the reverse pass starts, so that a
/// recording backend can append to the tape while we walk it.
struct NodeView {
    op: Op,
    inputs: Vec<VarId>,
    in_shapes: Vec<Vec<usize>>,
    out_shape: Vec<usize>,
}

pub(crate) struct Plan {
    output: VarId,
    wrt: Vec<VarId>,
    wrt_shapes: Vec<Vec<usize>>,
    /// Nodes lying on some path from a `wrt` leaf; only these receive
    /// gradient contributions.
    needed: Vec<bool>,
    views: Vec<Option<NodeView>>,
    out_shape: Vec<usize>,
}

impl Plan {
    pub fn new(tape: &Tape, output: VarId, wrt: &[VarId]) -> Result<Self> {
        tape.check(output)?;
        for &w in wrt {
            tape.check(w)?;
            match tape.node(w).op {
                Op::Leaf { differentiable: true } => {}
                _ => {
                    return Err(Error::Contract(format!("backward target #{} is not a differentiable leaf", w.index())))
                }
            }
        }
        let out_value = tape.value(output);
        if out_value.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar output, got shape {:?}", out_value.shape())));
        }

        let last = output.index();
        let mut needed = vec![false; last + 1];
        for &w in wrt {
            if w.index() <= last {
                needed[w.index()] = true;
            }
        }
        let mut views = Vec::with_capacity(last + 1);
        for i in 0..=last {
            let node = tape.node(VarId { tape: output.tape, index: i });
            if !needed[i] {
                needed[i] = node.inputs.iter().any(|j| needed[j.index()]);
            }
            let view = (needed[i] && !matches!(node.op, Op::Leaf { .. })).then(|| NodeView {
                op: node.op.clone(),
                inputs: node.inputs.clone(),
                in_shapes: node.inputs.iter().map(|&j| tape.value(j).shape().to_vec()).collect(),
                out_shape: node.value.shape().to_vec(),
            });
            views.push(view);
        }

        Ok(Plan {
            output,
            wrt: wrt.to_vec(),
            wrt_shapes: wrt.iter().map(|&w| tape.value(w).shape().to_vec()).collect(),
            needed,
            views,
            out_shape: out_value.shape().to_vec(),
        })
    }

    pub fn run<B: Backend>(&self, b: &mut B) -> Result<Vec<B::Value>> {
        let last = self.output.index();
        let mut grads: Vec<Option<B::Value>> = vec![None; last + 1];
        if self.needed[last] {
            grads[last] = Some(b.constant(Tensor::ones(self.out_shape.clone()))?);
        }

        for i in (0..=last).rev() {
            let Some(view) = &self.views[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            let want: Vec<bool> = view.inputs.iter().map(|j| self.needed[j.index()]).collect();
            let out_id = VarId { tape: self.output.tape, index: i };
            let contribs = vjp(b, view, out_id, &g, &want)?;
            for (j, c) in view.inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                let slot = &mut grads[j.index()];
                *slot = Some(match slot.take() {
                    None => c,
                    Some(prev) => b.apply(Op::Add, &[&prev, &c])?,
                });
            }
        }

        self.wrt
            .iter()
            .zip(&self.wrt_shapes)
            .map(|(w, shape)| match grads.get(w.index()).cloned().flatten() {
                Some(g) => Ok(g),
                None => b.constant(Tensor::zeros(shape.clone())),
            })
            .collect()
    }
}

/// Sums `g` back down to `shape` when the forward op broadcast a
/// single-element operand.
fn unbroadcast<B: Backend>(b: &mut B, g: B::Value, shape: &[usize], out_shape: &[usize]) -> Result<B::Value> {
    if shape == out_shape {
        return Ok(g);
    }
    let s = b.apply(Op::Sum, &[&g])?;
    b.apply(Op::Reshape(shape.to_vec()), &[&s])
}

fn vjp<B: Backend>(b: &mut B, v: &NodeView, out: VarId, g: &B::Value, want: &[bool]) -> Result<Vec<Option<B::Value>>> {
    let input = |k: usize| v.inputs[k];
    let mut grads: Vec<Option<B::Value>> = vec![None; v.inputs.len()];
    match &v.op {
        Op::Leaf { .. } => {}
        Op::Add => {
            for k in 0..2 {
                if want[k] {
                    grads[k] = Some(unbroadcast(b, g.clone(), &v.in_shapes[k], &v.out_shape)?);
                }
            }
        }
        Op::Sub => {
            if want[0] {
                grads[0] = Some(unbroadcast(b, g.clone(), &v.in_shapes[0], &v.out_shape)?);
            }
            if want[1] {
                let n = b.apply(Op::Scale(-1.0), &[g])?;
                grads[1] = Some(unbroadcast(b, n, &v.in_shapes[1], &v.out_shape)?);
            }
        }
        Op::Mul => {
            let (x, y) = (b.forward(input(0)), b.forward(input(1)));
            if want[0] {
                let t = b.apply(Op::Mul, &[g, &y])?;
                grads[0] = Some(unbroadcast(b, t, &v.in_shapes[0], &v.out_shape)?);
            }
            if want[1] {
                let t = b.apply(Op::Mul, &[g, &x])?;
                grads[1] = Some(unbroadcast(b, t, &v.in_shapes[1], &v.out_shape)?);
            }
        }
        Op::Div => {
            let y = b.forward(input(1));
            let q = b.apply(Op::Div, &[g, &y])?;
            if want[1] {
                let o = b.forward(out);
                let t = b.apply(Op::Mul, &[&q, &o])?;
                let t = b.apply(Op::Scale(-1.0), &[&t])?;
                grads[1] = Some(unbroadcast(b, t, &v.in_shapes[1], &v.out_shape)?);
            }
            if want[0] {
                grads[0] = Some(unbroadcast(b, q, &v.in_shapes[0], &v.out_shape)?);
            }
        }
        Op::MatMul => {
            let (x, y) = (b.forward(input(0)), b.forward(input(1)));
            if want[0] {
                let yt = b.apply(Op::Transpose, &[&y])?;
                grads[0] = Some(b.apply(Op::MatMul, &[g, &yt])?);
            }
            if want[1] {
                let xt = b.apply(Op::Transpose, &[&x])?;
                grads[1] = Some(b.apply(Op::MatMul, &[&xt, g])?);
            }
        }
        Op::Transpose => grads[0] = Some(b.apply(Op::Transpose, &[g])?),
        Op::Relu => {
            let x = b.forward(input(0));
            let mask = b.apply(Op::Step, &[&x])?;
            grads[0] = Some(b.apply(Op::Mul, &[g, &mask])?);
        }
        // Piecewise constant: contributes nothing.
        Op::Step => {}
        Op::Sum => {
            let shape = v.in_shapes[0].clone();
            let routes = fill_routes(shape.iter().product());
            grads[0] = Some(b.apply(Op::Gather { routes, shape }, &[g])?);
        }
        Op::Scale(c) => grads[0] = Some(b.apply(Op::Scale(*c), &[g])?),
        Op::Square => {
            let x = b.forward(input(0));
            let two_x = b.apply(Op::Scale(2.0), &[&x])?;
            grads[0] = Some(b.apply(Op::Mul, &[g, &two_x])?);
        }
        Op::ReciprocalShift(_) => {
            let o = b.forward(out);
            let o2 = b.apply(Op::Square, &[&o])?;
            let t = b.apply(Op::Mul, &[g, &o2])?;
            grads[0] = Some(b.apply(Op::Scale(-1.0), &[&t])?);
        }
        Op::Log => {
            let x = b.forward(input(0));
            grads[0] = Some(b.apply(Op::Div, &[g, &x])?);
        }
        Op::Softmax { axis } => {
            // dx = y * (g - sum_axis(g * y))
            let y = b.forward(out);
            let (routes, reduced) = axis_reduce_routes(&v.out_shape, *axis);
            let gy = b.apply(Op::Mul, &[g, &y])?;
            let s = b.apply(Op::ScatterAdd { routes: routes.clone(), shape: reduced }, &[&gy])?;
            let s = b.apply(Op::Gather { routes, shape: v.out_shape.clone() }, &[&s])?;
            let d = b.apply(Op::Sub, &[g, &s])?;
            grads[0] = Some(b.apply(Op::Mul, &[&y, &d])?);
        }
        Op::Reshape(_) => grads[0] = Some(b.apply(Op::Reshape(v.in_shapes[0].clone()), &[g])?),
        Op::Gather { routes, .. } | Op::MaxPool2d { routes, .. } => {
            grads[0] = Some(b.apply(Op::ScatterAdd { routes: routes.clone(), shape: v.in_shapes[0].clone() }, &[g])?);
        }
        Op::ScatterAdd { routes, .. } => {
            grads[0] = Some(b.apply(Op::Gather { routes: routes.clone(), shape: v.in_shapes[0].clone() }, &[g])?);
        }
        Op::Conv2d { stride, padding } => {
            let geo = ConvGeometry::new(&v.in_shapes[0], &v.in_shapes[1], *stride, *padding)?;
            let cols_routes = geo.im2col_routes();
            // Undo the output permutation: (N, O, OH, OW) -> (O, N·P).
            let g_mat = b.apply(Op::ScatterAdd { routes: geo.output_routes(), shape: geo.product_shape() }, &[g])?;
            if want[0] {
                let k = b.forward(input(1));
                let kmat = b.apply(Op::Reshape(geo.kernel_matrix_shape()), &[&k])?;
                let kt = b.apply(Op::Transpose, &[&kmat])?;
                let g_cols = b.apply(Op::MatMul, &[&kt, &g_mat])?;
                grads[0] = Some(
                    b.apply(Op::ScatterAdd { routes: cols_routes.clone(), shape: geo.input_shape() }, &[&g_cols])?,
                );
            }
            if want[1] {
                let x = b.forward(input(0));
                let cols = b.apply(Op::Gather { routes: cols_routes, shape: geo.columns_shape() }, &[&x])?;
                let ct = b.apply(Op::Transpose, &[&cols])?;
                let gk = b.apply(Op::MatMul, &[&g_mat, &ct])?;
                grads[1] = Some(b.apply(Op::Reshape(v.in_shapes[1].clone()), &[&gk])?);
            }
        }
    }
    Ok(grads)
}
