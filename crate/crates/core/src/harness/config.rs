use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::baselines::OhemConfig;
use crate::danil::DanilParams;
use crate::data::{generate_synthetic, load_csv, load_idx, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Base,
    Ohem,
    Danil,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Base, Method::Ohem, Method::Danil];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Ohem => "ohem",
            Method::Danil => "danil",
        }
    }
}

/// Where samples come from. File paths are resolved against the config
/// file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        separation: f64,
        noise: f64,
        #[serde(default)]
        distractor_rate: f64,
        samples_per_class: usize,
        /// Defaults to a stream derived from the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        classes: usize,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        classes: usize,
        train: PathBuf,
        test: PathBuf,
    },
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self {
            DataConfig::Synthetic { classes, .. }
            | DataConfig::Idx { classes, .. }
            | DataConfig::Csv { classes, .. } => *classes,
        }
    }

    /// Train and test splits for a run seeded with `run_seed`.
    pub fn load(&self, run_seed: u64, base_dir: &Path) -> Result<(Dataset, Dataset)> {
        let at = |p: &PathBuf| base_dir.join(p);
        let (train, test) = match self {
            &DataConfig::Synthetic { classes, dim, separation, noise, distractor_rate, samples_per_class, seed } => {
                generate_synthetic(&SyntheticSpec {
                    classes,
                    dim,
                    separation,
                    noise,
                    distractor_rate,
                    samples_per_class,
                    seed: seed.unwrap_or_else(|| derive_seed(run_seed, Stream::Data)),
                })?
            }
            DataConfig::Idx { classes, train_images, train_labels, test_images, test_labels } => (
                load_idx(at(train_images), at(train_labels), *classes)?,
                load_idx(at(test_images), at(test_labels), *classes)?,
            ),
            DataConfig::Csv { classes, train, test } => (load_csv(at(train), *classes)?, load_csv(at(test), *classes)?),
        };
        let retag = |d: Dataset, split| Dataset::new(d.inputs().to_vec(), d.labels().to_vec(), d.classes(), split);
        Ok((retag(train, Split::Train)?, retag(test, Split::Test)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.01, epochs: 30, batch_size: 16 }
    }
}

/// DANIL weights plus the optional validation search over `lambda`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DanilConfig {
    pub lambda: f64,
    pub eps: f64,
    /// When non-empty, `lambda` is ignored and the value with the best
    /// validation macro-F1 is used (ties go to the earlier entry).
    pub lambda_grid: Vec<f64>,
    /// Share of the training split held out while searching `lambda_grid`.
    pub validation_fraction: f64,
}

impl Default for DanilConfig {
    fn default() -> Self {
        let p = DanilParams::default();
        DanilConfig { lambda: p.lambda, eps: p.eps, lambda_grid: Vec::new(), validation_fraction: 0.2 }
    }
}

impl DanilConfig {
    pub fn params(&self, lambda: f64) -> DanilParams {
        DanilParams { lambda, eps: self.eps }
    }
}

/// One training run, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub danil: DanilConfig,
    #[serde(default)]
    pub ohem: OhemConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.model.classes() != self.data.classes() {
            return fail(format!("model predicts {} classes, data has {}", self.model.classes(), self.data.classes()));
        }
        if let DataConfig::Synthetic { dim, .. } = self.data {
            let numel: usize = self.model.input_shape().iter().product();
            if numel != dim {
                return fail(format!("model expects {numel} input features, synthetic data has {dim}"));
            }
        }
        let t = &self.train;
        if t.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if t.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return fail(format!("lr must be finite and >= 0, got {}", t.lr));
        }
        match self.method {
            Method::Base => {}
            Method::Ohem => self.ohem.validate()?,
            Method::Danil => {
                let d = &self.danil;
                d.params(d.lambda).validate()?;
                for &l in &d.lambda_grid {
                    d.params(l).validate()?;
                }
                if !d.lambda_grid.is_empty() && !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
                    return fail(format!("validation_fraction must lie in (0, 1), got {}", d.validation_fraction));
                }
            }
        }
        Ok(())
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Data = 1,
    Shuffle = 2,
    Validation = 3,
}

pub(crate) fn derive_seed(run_seed: u64, stream: Stream) -> u64 {
    let mut rng = SplitMix64::seed_from_u64(run_seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.next_u64()
}
