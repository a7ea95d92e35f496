//! Primitive operations and their forward kernels.
//!
//! Every primitive here has a reverse rule in `backward.rs` written purely in
//! terms of other primitives from this list.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index routing used by [`Op::Gather`] and [`Op::ScatterAdd`].
///
/// Entry `i` names the source element feeding output element `i` of a
/// gather (or the destination element receiving input element `i` of a
/// scatter). `None` reads as zero / discards.
pub type Routes = Arc<[Option<usize>]>;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf {
        differentiable: bool,
    },
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Relu,
    /// Heaviside step `x > 0`; zero derivative everywhere.
    Step,
    Sum,
    Scale(f64),
    Square,
    ReciprocalShift(f64),
    Log,
    Softmax {
        axis: usize,
    },
    Reshape(Vec<usize>),
    Gather {
        routes: Routes,
        shape: Vec<usize>,
    },
    ScatterAdd {
        routes: Routes,
        shape: Vec<usize>,
    },
    MaxPool2d {
        window: usize,
        routes: Routes,
    },
    Conv2d {
        stride: usize,
        padding: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::Square => "square",
            Op::ReciprocalShift(_) => "reciprocal_shift",
            Op::Log => "log",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Conv2d { .. } => "conv2d",
        }
    }

    pub(crate) fn arity(&self) -> usize {
        match self {
            Op::Leaf { .. } => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::Conv2d { .. } => 2,
            _ => 1,
        }
    }

    /// Evaluates the op on concrete inputs. Does not check finiteness.
    pub(crate) fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.arity() {
            return Err(Error::Contract(format!(
                "{} takes {} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        match self {
            Op::Leaf { .. } => unreachable!("leaves are never evaluated"),
            Op::Add => binary("add", inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => binary("sub", inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => binary("mul", inputs[0], inputs[1], |a, b| a * b),
            Op::Div => binary("div", inputs[0], inputs[1], |a, b| a / b),
            Op::MatMul => matmul(inputs[0], inputs[1]),
            Op::Transpose => transpose(inputs[0]),
            Op::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Step => Ok(inputs[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 })),
            Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Op::Scale(c) => Ok(inputs[0].map(|v| v * c)),
            Op::Square => Ok(inputs[0].map(|v| v * v)),
            Op::ReciprocalShift(eps) => {
                check_eps(*eps)?;
                Ok(inputs[0].map(|v| 1.0 / (v + eps)))
            }
            Op::Log => Ok(inputs[0].map(f64::ln)),
            Op::Softmax { axis } => softmax(inputs[0], *axis),
            Op::Reshape(shape) => inputs[0].clone().reshape(shape.clone()),
            Op::Gather { routes, shape } => gather(inputs[0], routes, shape),
            Op::ScatterAdd { routes, shape } => scatter_add(inputs[0], routes, shape),
            Op::MaxPool2d { routes, .. } => {
                let out_shape = pool_output_shape(inputs[0].shape(), self.window())?;
                gather(inputs[0], routes, &out_shape)
            }
            Op::Conv2d { stride, padding } => {
                let geo = ConvGeometry::new(inputs[0].shape(), inputs[1].shape(), *stride, *padding)?;
                conv2d(&geo, inputs[0], inputs[1])
            }
        }
    }

    fn window(&self) -> usize {
        match self {
            Op::MaxPool2d { window, .. } => *window,
            _ => 1,
        }
    }
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("eps must be positive and finite, got {eps}")))
    }
}

/// Output shape of an elementwise binary op, allowing one operand to be a
/// single-element tensor that broadcasts.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if a == b || numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.numel() == 1 {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new([m, n], out)
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = a.shape() else {
        return Err(Error::shape("transpose", a.shape(), &[]));
    };
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(Error::Domain(format!("softmax axis {axis} out of range for shape {:?}", a.shape())));
    }
    let shape = a.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = a.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * len + i) * inner + r;
            let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (src[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn gather(a: &Tensor, routes: &[Option<usize>], shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != routes.len() {
        return Err(Error::shape("gather", &[routes.len()], shape));
    }
    let src = a.data();
    let data = routes
        .iter()
        .map(|r| match *r {
            Some(j) if j < src.len() => Ok(src[j]),
            Some(j) => Err(Error::Domain(format!("gather route {j} outside source of {} elements", src.len()))),
            None => Ok(0.0),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape.to_vec(), data)
}

fn scatter_add(a: &Tensor, routes: &[Option<usize>], shape: &[usize]) -> Result<Tensor> {
    if a.numel() != routes.len() {
        return Err(Error::shape("scatter_add", a.shape(), &[routes.len()]));
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let dst = out.data_mut();
    for (&v, r) in a.data().iter().zip(routes.iter()) {
        if let Some(j) = *r {
            let Some(slot) = dst.get_mut(j) else {
                return Err(Error::Domain(format!(
                    "scatter route {j} outside destination of {} elements",
                    shape.iter().product::<usize>()
                )));
            };
            *slot += v;
        }
    }
    Ok(out)
}

/// For every element of `shape`, its flat index once `axis` is collapsed to
/// length 1. Scatter-adding along these routes sums over the axis; gathering
/// along them broadcasts back.
pub(crate) fn axis_reduce_routes(shape: &[usize], axis: usize) -> (Routes, Vec<usize>) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let numel: usize = shape.iter().product();
    let routes = (0..numel)
        .map(|i| {
            let o = i / (len * inner);
            let r = i % inner;
            Some(o * inner + r)
        })
        .collect();
    let mut reduced = shape.to_vec();
    reduced[axis] = 1;
    (routes, reduced)
}

/// Routes that broadcast a single element over `shape`.
pub(crate) fn fill_routes(numel: usize) -> Routes {
    vec![Some(0); numel].into()
}

fn split_spatial(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [n, c, h, w] => Some((n, c, h, w)),
        _ => None,
    }
}

pub(crate) fn pool_output_shape(shape: &[usize], window: usize) -> Result<Vec<usize>> {
    let (_, _, h, w) = split_spatial(shape).ok_or_else(|| Error::shape("maxpool2d", shape, &[window, window]))?;
    if window == 0 || h < window || w < window {
        return Err(Error::shape("maxpool2d", shape, &[window, window]));
    }
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 2] = h / window;
    out[r - 1] = w / window;
    Ok(out)
}

/// Routes selecting, for each pooling window, the flat index of its maximum.
/// Windows are non-overlapping; ties go to the lowest flat index.
pub(crate) fn maxpool_routes(a: &Tensor, window: usize) -> Result<Routes> {
    let out_shape = pool_output_shape(a.shape(), window)?;
    let (n, c, h, w) = split_spatial(a.shape()).expect("checked by pool_output_shape");
    let (oh, ow) = (h / window, w / window);
    let src = a.data();
    let mut routes = Vec::with_capacity(out_shape.iter().product());
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * window) * w + j * window;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (i * window + di) * w + j * window + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                routes.push(Some(best));
            }
        }
    }
    Ok(routes.into())
}

/// Shape bookkeeping for a 2-D convolution over a `(C, H, W)` or
/// `(N, C, H, W)` input with an `(O, C, KH, KW)` kernel.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    pub batched: bool,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let mismatch = || Error::shape("conv2d", input, kernel);
        let (n, c, h, w) = split_spatial(input).ok_or_else(mismatch)?;
        let &[o, kc, kh, kw] = kernel else {
            return Err(mismatch());
        };
        if stride == 0 {
            return Err(Error::Domain("conv2d stride must be at least 1".into()));
        }
        if kc != c || kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch());
        }
        Ok(ConvGeometry {
            batched: input.len() == 4,
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn input_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.c, self.h, self.w]
        } else {
            vec![self.c, self.h, self.w]
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.o, self.oh, self.ow]
        } else {
            vec![self.o, self.oh, self.ow]
        }
    }

    pub fn columns_shape(&self) -> Vec<usize> {
        vec![self.patch_len(), self.n * self.positions()]
    }

    pub fn product_shape(&self) -> Vec<usize> {
        vec![self.o, self.n * self.positions()]
    }

    pub fn kernel_matrix_shape(&self) -> Vec<usize> {
        vec![self.o, self.patch_len()]
    }

    /// im2col: row `(c, ki, kj)`, column `(n, i, j)` reads the input pixel
    /// under that kernel tap, or zero padding.
    pub fn im2col_routes(&self) -> Routes {
        let cols = self.n * self.positions();
        let mut routes = vec![None; self.patch_len() * cols];
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for n in 0..self.n {
                        for i in 0..self.oh {
                            for j in 0..self.ow {
                                let y = (i * self.stride + ki) as isize - self.padding as isize;
                                let x = (j * self.stride + kj) as isize - self.padding as isize;
                                if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                                    continue;
                                }
                                let col = (n * self.oh + i) * self.ow + j;
                                let src = ((n * self.c + c) * self.h + y as usize) * self.w + x as usize;
                                routes[row * cols + col] = Some(src);
                            }
                        }
                    }
                }
            }
        }
        routes.into()
    }

    /// Permutes the `(O, N·P)` product into `(N, O, OH, OW)` order.
    pub fn output_routes(&self) -> Routes {
        let p = self.positions();
        let mut routes = Vec::with_capacity(self.n * self.o * p);
        for n in 0..self.n {
            for o in 0..self.o {
                for q in 0..p {
                    routes.push(Some(o * self.n * p + n * p + q));
                }
            }
        }
        routes.into()
    }
}

fn conv2d(geo: &ConvGeometry, input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let cols = gather(input, &geo.im2col_routes(), &geo.columns_shape())?;
    let kmat = kernel.clone().reshape(geo.kernel_matrix_shape())?;
    let product = matmul(&kmat, &cols)?;
    gather(&product, &geo.output_routes(), &geo.output_shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(Op::Mul.eval(&[&a, &s]).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(Op::Sub.eval(&[&s, &a]).unwrap().data(), &[1.0, 0.0, -1.0]);
        let b = t(&[2], &[1.0, 1.0]);
        assert!(matches!(Op::Add.eval(&[&a, &b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn axis_routes_sum_rows() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (routes, keep) = axis_reduce_routes(a.shape(), 1);
        let s = scatter_add(&a, &routes, &keep).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.data(), &[6.0, 15.0]);
        let (routes, keep) = axis_reduce_routes(a.shape(), 0);
        let s = scatter_add(&a, &routes, &keep).unwrap();
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let a = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = softmax(&a, 0).unwrap();
        for v in s.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(matches!(softmax(&a, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let a = t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]);
        let routes = maxpool_routes(&a, 2).unwrap();
        assert_eq!(&*routes, &[Some(0)]);
        let b = t(&[1, 2, 4], &[1.0, 3.0, 0.0, 0.0, 2.0, 3.0, 7.0, 0.0]);
        let routes = maxpool_routes(&b, 2).unwrap();
        assert_eq!(&*routes, &[Some(1), Some(6)]);
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_zero_stride() {
        assert!(ConvGeometry::new(&[1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 2, 2], &[1, 1, 3, 3], 1, 1).is_ok());
        assert!(matches!(ConvGeometry::new(&[1, 4, 4], &[1, 1, 3, 3], 0, 0), Err(Error::Domain(_))));
        assert!(matches!(ConvGeometry::new(&[2, 4, 4], &[1, 1, 3, 3], 1, 0), Err(Error::Shape { .. })));
    }
}
