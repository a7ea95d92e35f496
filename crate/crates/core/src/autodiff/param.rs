use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor together with a gradient slot of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { value, grad }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Gradient used by the most recent update.
    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }
}

/// Plain gradient descent: `value <- value - lr * grad` for each pair.
pub fn sgd_update(params: &mut [Parameter], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_update", &[params.len()], &[grads.len()]));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Domain(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("sgd_update", p.value.shape(), g.shape()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "sgd_update" });
        }
        p.grad = g.clone();
    }
    Ok(())
}
