//! Independent oracles shared by the integration tests: finite differences
//! and a plain-arithmetic MLP that never touches the tape.

#![allow(dead_code)]

use danil::Tensor;
use rand::Rng;
use rand_xoshiro::SplitMix64;

/// Entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute distance when
/// both vectors are (numerically) zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Splits a flat vector back into tensors with the given shapes.
pub fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[at..at + n].to_vec()).unwrap();
            at += n;
            t
        })
        .collect()
}

pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Straight-line MLP with relu hidden layers. `params` alternates weight
/// (in x out, row-major) and bias, matching the crate's parameter order.
pub struct RefMlp<'a> {
    pub widths: &'a [usize],
    pub params: &'a [Vec<f64>],
}

pub struct RefForward {
    /// Pre-activations per layer.
    pub pre: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl RefMlp<'_> {
    pub fn forward(&self, x: &[f64]) -> RefForward {
        let layers = self.widths.len() - 1;
        let mut h = x.to_vec();
        let mut pre = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let mut z = vec![0.0; n_out];
            for j in 0..n_out {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += h[i] * w[i * n_out + j];
                }
                z[j] = acc + b[j];
            }
            pre.push(z.clone());
            h = if l + 1 < layers { z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() } else { z };
        }
        RefForward { pre, logits: h }
    }

    /// Gradient of `-log softmax(f(x))[class]` with respect to `x`.
    pub fn input_grad(&self, x: &[f64], class: usize) -> Vec<f64> {
        let fw = self.forward(x);
        let p = softmax(&fw.logits);
        let mut g: Vec<f64> = p.iter().enumerate().map(|(k, &pk)| pk - if k == class { 1.0 } else { 0.0 }).collect();
        let layers = self.widths.len() - 1;
        for l in (0..layers).rev() {
            if l + 1 < layers {
                for (gj, &z) in g.iter_mut().zip(&fw.pre[l]) {
                    if z <= 0.0 {
                        *gj = 0.0;
                    }
                }
            }
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[2 * l];
            let mut gin = vec![0.0; n_in];
            for i in 0..n_in {
                for j in 0..n_out {
                    gin[i] += w[i * n_out + j] * g[j];
                }
            }
            g = gin;
        }
        g
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `-log(exp(z_k) / Σ exp(z_j))` evaluated directly via log-sum-exp.
pub fn cross_entropy(z: &[f64], class: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[class]
}

/// Smallest gap between the largest logit and any other; used to skip
/// probes that could flip the arg-max.
pub fn top_margin(z: &[f64]) -> f64 {
    let mut s = z.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[0] - s[1]
}
