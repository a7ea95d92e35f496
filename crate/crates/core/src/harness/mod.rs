//! Experiment plumbing behind the `danil` command-line tool: run configs,
//! training loops, reports, checkpoints and response-map export.

mod config;
mod pgm;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::autodiff::Tape;
use crate::danil::{export_response_map, intrinsic_response_map, make_pseudo_label, ChannelReduce, MapKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, Model};

pub use config::{DanilConfig, DataConfig, Method, RunConfig, TrainConfig};
pub use pgm::{decode_pgm, encode_pgm};
pub use run::{evaluate, run, train_epochs, EpochRecord, Metrics, RunReport, Stepper, TuningRecord};

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.dnlm";
pub const COMPARE_FILE: &str = "compare.json";

/// Pretty JSON with every real rounded to six decimal places.
pub fn to_json<T: Serialize>(value: &T) -> String {
    fn round(v: &mut Value) {
        match v {
            Value::Number(n) if n.is_f64() => {
                let x = n.as_f64().unwrap();
                let r = (x * 1e6).round() / 1e6;
                *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
            }
            Value::Array(items) => items.iter_mut().for_each(round),
            Value::Object(map) => map.values_mut().for_each(round),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(value).expect("report serializes");
    round(&mut v);
    let mut text = serde_json::to_string_pretty(&v).expect("json value serializes");
    text.push('\n');
    text
}

/// Directory against which a config's relative data paths resolve.
fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
    }
}

/// Trains as configured and writes the report and checkpoint into the
/// output directory.
pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<(RunReport, PathBuf)> {
    let mut config = RunConfig::load(config_path)?;
    overrides.apply(&mut config);
    let (model, report) = run(&config, &base_dir(config_path))?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join(REPORT_FILE), to_json(&report))?;
    save_checkpoint(&model, config.out_dir.join(CHECKPOINT_FILE))?;
    Ok((report, config.out_dir))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    #[default]
    Test,
}

/// Loads the checkpoint and the config's data. Synthetic data is
/// regenerated from the seed stored in the checkpoint.
fn model_and_data(checkpoint: &Path, config_path: &Path, split: SplitChoice) -> Result<(Model, Dataset)> {
    let model = load_checkpoint(checkpoint)?;
    let config = RunConfig::load(config_path)?;
    let (train, test) = config.data.load(model.seed(), &base_dir(config_path))?;
    let data = match split {
        SplitChoice::Train => train,
        SplitChoice::Test => test,
    };
    if let Some(shape) = data.sample_shape() {
        let want = model.config().input_shape();
        if shape.iter().product::<usize>() != want.iter().product::<usize>() || data.classes() != model.classes() {
            return Err(Error::shape("checkpoint vs dataset", shape, &want));
        }
    }
    Ok((model, data))
}

pub fn cmd_eval(checkpoint: &Path, config_path: &Path, split: SplitChoice) -> Result<Metrics> {
    let (model, data) = model_and_data(checkpoint, config_path, split)?;
    evaluate(&model, &data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaliencyOutcome {
    pub sample: usize,
    pub truth: usize,
    pub predicted: usize,
    /// `A+` first, then `A-` when the sample is misclassified.
    pub files: Vec<PathBuf>,
}

/// Writes the sample's response maps as PGM images:
/// `sample_<i>_a_plus.pgm` always, `sample_<i>_a_minus.pgm` only when the
/// model gets the sample wrong.
pub fn cmd_saliency(
    checkpoint: &Path,
    config_path: &Path,
    split: SplitChoice,
    sample: usize,
    out_dir: &Path,
) -> Result<SaliencyOutcome> {
    let (model, data) = model_and_data(checkpoint, config_path, split)?;
    let (x, truth) = match (data.inputs().get(sample), data.labels().get(sample)) {
        (Some(x), Some(l)) => (x, *l),
        _ => return Err(Error::Domain(format!("sample {sample} outside a split of {} samples", data.len()))),
    };
    let logits = model.logits(&[x])?;
    let predicted = logits.argmax().expect("non-empty logits");
    let pseudo = make_pseudo_label(&logits, &truth)?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut write = |label, kind, suffix: &str| -> Result<()> {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape)?;
        let xv = tape.leaf(x.clone(), true)?;
        let map = intrinsic_response_map(&mut tape, &model, &params, xv, &label, kind, false)?;
        let path = out_dir.join(format!("sample_{sample}_{suffix}.pgm"));
        fs::write(&path, encode_pgm(&export_response_map(&map, ChannelReduce::AbsMax)?))?;
        files.push(path);
        Ok(())
    };
    write(truth, MapKind::Positive, "a_plus")?;
    match pseudo {
        Some(pseudo) => write(pseudo, MapKind::Negative, "a_minus")?,
        None => log::info!("sample {sample} is classified correctly; no distractor map exists"),
    }
    Ok(SaliencyOutcome { sample, truth: truth.index(), predicted, files })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: Method,
    pub test_macro_f1: Summary,
    pub test_accuracy: Summary,
    /// Per-seed results, in seed order.
    pub runs: Vec<CompareRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRun {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub test_macro_f1: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    pub config: RunConfig,
}

impl CompareReport {
    pub fn row(&self, method: Method) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Runs every method for every seed on identical data and summarizes test
/// metrics per method. Runs execute in parallel.
pub fn compare(config: &RunConfig, seeds: &[u64], base_dir: &Path) -> Result<CompareReport> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let jobs: Vec<(Method, u64)> = Method::ALL.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let cfg = RunConfig { method, seed, ..config.clone() };
            run(&cfg, base_dir).map(|(_, report)| report)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = Method::ALL
        .iter()
        .map(|&method| {
            let runs: Vec<CompareRun> = results
                .iter()
                .filter(|r| r.method == method)
                .map(|r| CompareRun {
                    seed: r.seed,
                    lambda: r.lambda,
                    test_macro_f1: r.test.macro_f1,
                    test_accuracy: r.test.accuracy,
                })
                .collect();
            let f1: Vec<f64> = runs.iter().map(|r| r.test_macro_f1).collect();
            let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
            CompareRow { method, test_macro_f1: Summary::of(&f1), test_accuracy: Summary::of(&acc), runs }
        })
        .collect();
    Ok(CompareReport { seeds: seeds.to_vec(), rows, config: config.clone() })
}

pub fn cmd_compare(config_path: &Path, seeds: &[u64], overrides: &Overrides) -> Result<(CompareReport, PathBuf)> {
    let mut config = RunConfig::load(config_path)?;
    overrides.apply(&mut config);
    let report = compare(&config, seeds, &base_dir(config_path))?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join(COMPARE_FILE), to_json(&report))?;
    Ok((report, config.out_dir))
}
