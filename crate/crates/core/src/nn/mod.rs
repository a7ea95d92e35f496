//! Toy classifiers built from autodiff primitives: an MLP and a small CNN.
//!
//! Hidden layers use relu. The last layer emits raw logits; losses apply the
//! softmax themselves.

mod checkpoint;

use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Routes, Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input dimension first, class count last.
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    /// Max-pool window applied after the activation; 1 disables pooling.
    #[serde(default = "no_pool")]
    pub pool: usize,
}

fn no_pool() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmallCnnConfig {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub blocks: Vec<ConvBlock>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Mlp(MlpConfig),
    Cnn(SmallCnnConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Weight { fan_in: usize },
    Bias,
}

impl ModelConfig {
    pub fn mlp(widths: impl Into<Vec<usize>>) -> Self {
        ModelConfig::Mlp(MlpConfig { widths: widths.into() })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mlp(c) => {
                if c.widths.len() < 2 {
                    return Err(Error::Config("mlp needs at least an input and an output width".into()));
                }
                if c.widths.contains(&0) {
                    return Err(Error::Config(format!("mlp widths must be positive: {:?}", c.widths)));
                }
                Ok(())
            }
            ModelConfig::Cnn(c) => {
                if c.classes < 2 {
                    return Err(Error::Config("cnn needs at least 2 classes".into()));
                }
                if c.input.contains(&0) {
                    return Err(Error::Config(format!("cnn input extents must be positive: {:?}", c.input)));
                }
                cnn_feature_shape(c).map(|_| ())
            }
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => *c.widths.last().unwrap_or(&0),
            ModelConfig::Cnn(c) => c.classes,
        }
    }

    /// Shape of a single input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelConfig::Mlp(c) => vec![c.widths.first().copied().unwrap_or(0)],
            ModelConfig::Cnn(c) => c.input.to_vec(),
        }
    }

    fn layout(&self) -> Result<Vec<(Vec<usize>, Role)>> {
        self.validate()?;
        let mut out = Vec::new();
        match self {
            ModelConfig::Mlp(c) => {
                for w in c.widths.windows(2) {
                    out.push((vec![w[0], w[1]], Role::Weight { fan_in: w[0] }));
                    out.push((vec![w[1]], Role::Bias));
                }
            }
            ModelConfig::Cnn(c) => {
                let mut channels = c.input[0];
                for b in &c.blocks {
                    let fan_in = channels * b.kernel * b.kernel;
                    out.push((vec![b.out_channels, channels, b.kernel, b.kernel], Role::Weight { fan_in }));
                    out.push((vec![b.out_channels], Role::Bias));
                    channels = b.out_channels;
                }
                let features: usize = cnn_feature_shape(c)?.iter().product();
                out.push((vec![features, c.classes], Role::Weight { fan_in: features }));
                out.push((vec![c.classes], Role::Bias));
            }
        }
        Ok(out)
    }

    /// Shapes of every parameter tensor, in declaration order.
    pub fn parameter_shapes(&self) -> Result<Vec<Vec<usize>>> {
        Ok(self.layout()?.into_iter().map(|(s, _)| s).collect())
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.parameter_shapes()?.iter().map(|s| s.iter().product::<usize>()).sum())
    }
}

/// `(channels, height, width)` entering the final linear layer.
fn cnn_feature_shape(c: &SmallCnnConfig) -> Result<[usize; 3]> {
    let [mut ch, mut h, mut w] = c.input;
    for (i, b) in c.blocks.iter().enumerate() {
        if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0 {
            return Err(Error::Config(format!("conv block {i} has a zero extent: {b:?}")));
        }
        if h + 2 * b.padding < b.kernel || w + 2 * b.padding < b.kernel {
            return Err(Error::Config(format!(
                "conv block {i}: kernel {} does not fit a {h}x{w} input with padding {}",
                b.kernel, b.padding
            )));
        }
        h = (h + 2 * b.padding - b.kernel) / b.stride + 1;
        w = (w + 2 * b.padding - b.kernel) / b.stride + 1;
        if h < b.pool || w < b.pool {
            return Err(Error::Config(format!("conv block {i}: pool window {} exceeds {h}x{w}", b.pool)));
        }
        h /= b.pool;
        w /= b.pool;
        ch = b.out_channels;
    }
    Ok([ch, h, w])
}

/// Routes broadcasting a per-channel vector of length `channels` over a
/// tensor of `numel` elements where each channel occupies `inner`
/// consecutive elements.
fn channel_routes(numel: usize, channels: usize, inner: usize) -> Routes {
    (0..numel).map(|i| Some((i / inner) % channels)).collect()
}

/// A classifier: configuration plus parameters in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    seed: u64,
}

/// Model parameters registered as differentiable leaves on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<VarId>);

impl BoundParams {
    pub fn ids(&self) -> &[VarId] {
        &self.0
    }
}

/// Weights uniform in `[-s, s]` with `s = sqrt(6 / fan_in)`, biases zero.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    let layout = config.layout()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let params = layout
        .into_iter()
        .map(|(shape, role)| {
            let numel = shape.iter().product();
            let data = match role {
                Role::Bias => vec![0.0; numel],
                Role::Weight { fan_in } => {
                    let s = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-s, s).expect("finite bounds");
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            Tensor::new(shape, data).map(Parameter::new)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model { config, params, seed })
}

impl Model {
    /// Builds a model from explicit parameter values, checked against the
    /// config's layout.
    pub fn from_parameters(config: ModelConfig, values: Vec<Tensor>, seed: u64) -> Result<Self> {
        let shapes = config.parameter_shapes()?;
        if shapes.len() != values.len() {
            return Err(Error::shape("model parameters", &[shapes.len()], &[values.len()]));
        }
        for (s, v) in shapes.iter().zip(&values) {
            if s.as_slice() != v.shape() {
                return Err(Error::shape("model parameters", s, v.shape()));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "model parameters" });
            }
        }
        Ok(Model { config, params: values.into_iter().map(Parameter::new).collect(), seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Mutable access to one parameter's values, for probing in tests.
    pub fn parameter_values_mut(&mut self, index: usize) -> &mut Tensor {
        self.params[index].value_mut()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        self.params.iter().map(|p| tape.leaf(p.value().clone(), true)).collect::<Result<Vec<_>>>().map(BoundParams)
    }

    /// Logits of shape `(batch, classes)` for a batch input `x` whose leading
    /// axis is the batch.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: VarId) -> Result<VarId> {
        let sample = self.config.input_shape();
        let shape = tape.value(x).shape().to_vec();
        let batch = *shape.first().ok_or_else(|| Error::shape("forward", &shape, &sample))?;
        let p = params.ids();
        match &self.config {
            ModelConfig::Mlp(c) => {
                let d = sample[0];
                if shape[1..].iter().product::<usize>() != d || shape.len() < 2 {
                    return Err(Error::shape("forward", &shape, &sample));
                }
                let mut h = if shape.len() == 2 { x } else { tape.reshape(x, [batch, d])? };
                let layers = c.widths.len() - 1;
                for l in 0..layers {
                    h = self.dense(tape, h, p[2 * l], p[2 * l + 1], batch, c.widths[l + 1])?;
                    if l + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            ModelConfig::Cnn(c) => {
                if shape[1..] != sample[..] {
                    return Err(Error::shape("forward", &shape, &sample));
                }
                let mut h = x;
                for (i, b) in c.blocks.iter().enumerate() {
                    h = tape.conv2d(h, p[2 * i], b.stride, b.padding)?;
                    let out = tape.value(h).shape().to_vec();
                    let inner = out[2] * out[3];
                    let routes = channel_routes(out.iter().product(), b.out_channels, inner);
                    let bias = tape.gather(p[2 * i + 1], routes, out)?;
                    h = tape.add(h, bias)?;
                    h = tape.relu(h)?;
                    if b.pool > 1 {
                        h = tape.maxpool2d(h, b.pool)?;
                    }
                }
                let features: usize = tape.value(h).shape()[1..].iter().product();
                let flat = tape.reshape(h, [batch, features])?;
                let k = 2 * c.blocks.len();
                self.dense(tape, flat, p[k], p[k + 1], batch, c.classes)
            }
        }
    }

    fn dense(&self, tape: &mut Tape, x: VarId, w: VarId, b: VarId, batch: usize, out: usize) -> Result<VarId> {
        let z = tape.matmul(x, w)?;
        let bias = tape.gather(b, channel_routes(batch * out, out, 1), [batch, out])?;
        tape.add(z, bias)
    }

    /// Logits for a batch of samples, evaluated on a throwaway tape.
    pub fn logits(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let batch = stack(inputs)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape)?;
        let x = tape.constant(batch)?;
        let z = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(z).clone())
    }

    /// Arg-max class per sample (ties to the lowest class index).
    pub fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<usize>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.logits(inputs)?;
        let n = self.classes();
        Ok(z.data().chunks(n).map(|row| Tensor::vector(row.to_vec()).argmax().unwrap_or(0)).collect())
    }
}

/// Stacks equally shaped samples along a new leading batch axis.
pub fn stack(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * inputs.len());
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![inputs.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cnn() -> ModelConfig {
        ModelConfig::Cnn(SmallCnnConfig {
            input: [1, 6, 6],
            blocks: vec![ConvBlock { out_channels: 2, kernel: 3, stride: 1, padding: 0, pool: 2 }],
            classes: 3,
        })
    }

    #[test]
    fn mlp_parameter_shapes() {
        let shapes = ModelConfig::mlp([4, 8, 3]).parameter_shapes().unwrap();
        assert_eq!(shapes, vec![vec![4, 8], vec![8], vec![8, 3], vec![3]]);
    }

    #[test]
    fn parameter_count_closed_form() {
        let widths = [5, 7, 4, 3];
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(ModelConfig::mlp(widths).parameter_count().unwrap(), expected);
        // conv 2x1x3x3 + 2, then 2*2*2 features -> 3 classes
        assert_eq!(tiny_cnn().parameter_count().unwrap(), 18 + 2 + 8 * 3 + 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(ModelConfig::mlp([4]).validate(), Err(Error::Config(_))));
        assert!(matches!(ModelConfig::mlp([4, 0, 2]).validate(), Err(Error::Config(_))));
        let bad = ModelConfig::Cnn(SmallCnnConfig {
            input: [1, 2, 2],
            blocks: vec![ConvBlock { out_channels: 1, kernel: 3, stride: 1, padding: 0, pool: 1 }],
            classes: 2,
        });
        assert!(matches!(init_model(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(ModelConfig::mlp([4, 8, 3]), 42).unwrap();
        let b = init_model(ModelConfig::mlp([4, 8, 3]), 42).unwrap();
        let c = init_model(ModelConfig::mlp([4, 8, 3]), 43).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            assert!(pa.value().bit_eq(pb.value()));
        }
        assert_ne!(a, c);
        assert!(a.parameters()[1].value().data().iter().all(|&v| v == 0.0));
        assert!(a.parameters()[3].value().data().iter().all(|&v| v == 0.0));
        let s = (6.0f64 / 4.0).sqrt();
        assert!(a.parameters()[0].value().data().iter().all(|v| v.abs() <= s));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        for cfg in [ModelConfig::mlp([3, 5, 2]), tiny_cnn()] {
            let values = cfg.parameter_shapes().unwrap().into_iter().map(Tensor::zeros).collect();
            let m = Model::from_parameters(cfg.clone(), values, 0).unwrap();
            let x = Tensor::full(cfg.input_shape(), 0.7);
            let z = m.logits(&[&x, &x]).unwrap();
            assert_eq!(z.shape(), &[2, cfg.classes()]);
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = init_model(ModelConfig::mlp([3, 2]), 0).unwrap();
        let x = Tensor::zeros([4]);
        assert!(matches!(m.logits(&[&x]), Err(Error::Shape { .. })));
        let m = init_model(tiny_cnn(), 0).unwrap();
        let x = Tensor::zeros([1, 5, 6]);
        assert!(matches!(m.logits(&[&x]), Err(Error::Shape { .. })));
    }
}
