use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::danil::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Share of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.7;

/// Gaussian classes around scaled basis vectors, with an optional share of
/// look-alike samples drawn halfway towards another class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Class `k` is centred on `separation * e_k`.
    pub separation: f64,
    /// Per-feature standard deviation.
    pub noise: f64,
    /// Fraction of samples centred on the midpoint to another class.
    #[serde(default)]
    pub distractor_rate: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes > self.dim {
            return fail(format!("{} classes need dim >= classes, got dim {}", self.classes, self.dim));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return fail(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return fail(format!("noise must be finite and > 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return fail(format!("distractor_rate must lie in [0, 1], got {}", self.distractor_rate));
        }
        if self.samples_per_class < 2 {
            return fail("samples_per_class must be at least 2 so both splits are non-empty".into());
        }
        Ok(())
    }

    /// Training samples per class; the rest go to the test split.
    pub fn train_per_class(&self) -> usize {
        let n = (self.samples_per_class as f64 * TRAIN_FRACTION).round() as usize;
        n.clamp(1, self.samples_per_class - 1)
    }
}

/// Draws the dataset and splits every class 70/30 into train and test.
///
/// A master SplitMix64 seeded from `spec.seed` hands each class its own
/// stream, so adding samples to one class leaves the others unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut master = SplitMix64::seed_from_u64(spec.seed);
    let class_seeds: Vec<u64> = (0..spec.classes).map(|_| master.next_u64()).collect();
    let n_train = spec.train_per_class();
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (k, &seed) in class_seeds.iter().enumerate() {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let label = Label::new(spec.classes, k)?;
        for i in 0..spec.samples_per_class {
            let x = draw(spec, k, &mut rng);
            if i < n_train {
                train_x.push(x);
                train_y.push(label);
            } else {
                test_x.push(x);
                test_y.push(label);
            }
        }
    }
    Ok((
        Dataset::new(train_x, train_y, spec.classes, Split::Train)?,
        Dataset::new(test_x, test_y, spec.classes, Split::Test)?,
    ))
}

fn draw(spec: &SyntheticSpec, class: usize, rng: &mut SplitMix64) -> Tensor {
    let mut centre = vec![0.0; spec.dim];
    let distractor = rng.random::<f64>() < spec.distractor_rate;
    if distractor {
        let mut other = rng.random_range(0..spec.classes - 1);
        if other >= class {
            other += 1;
        }
        centre[class] = spec.separation / 2.0;
        centre[other] = spec.separation / 2.0;
    } else {
        centre[class] = spec.separation;
    }
    let data = centre.into_iter().map(|m| m + spec.noise * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::vector(data)
}
