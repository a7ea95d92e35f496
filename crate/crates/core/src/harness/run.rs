use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{derive_seed, Method, RunConfig, Stream};
use crate::baselines::{ce_step, ohem_step};
use crate::danil::{danil_step, DanilParams, StepReport};
use crate::data::{shuffled_indices, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, confusion, macro_f1};
use crate::nn::{init_model, Model};

/// Means over one pass through the training split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l_c_plus: f64,
    pub mean_l_d: f64,
    pub mean_l_total: f64,
    /// Share of samples classified correctly by the model as it stood when
    /// each sample's batch was processed.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuningRecord {
    pub lambda: f64,
    pub validation: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// The weight used for the final DANIL model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tuning: Vec<TuningRecord>,
    pub epochs: Vec<EpochRecord>,
    pub train: Metrics,
    pub test: Metrics,
    pub config: RunConfig,
    pub wall_clock_seconds: f64,
}

/// Macro-F1, accuracy and confusion matrix of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    if model.classes() != data.classes() {
        return Err(Error::shape("evaluate", &[model.classes()], &[data.classes()]));
    }
    let inputs: Vec<_> = data.inputs().iter().collect();
    let preds = model.predict(&inputs)?;
    let cm = confusion(&preds, &data.label_indices(), data.classes())?;
    Ok(Metrics {
        samples: data.len(),
        macro_f1: macro_f1(&cm)?,
        accuracy: accuracy(&cm)?,
        confusion: cm.counts().to_vec(),
    })
}

/// The per-batch update of one method.
#[derive(Clone, Copy, Debug)]
pub enum Stepper<'a> {
    Base,
    Ohem(&'a crate::baselines::OhemConfig),
    Danil(DanilParams),
}

impl Stepper<'_> {
    fn step(&self, model: &mut Model, batch: &crate::data::Batch<'_>, lr: f64) -> Result<StepReport> {
        match self {
            Stepper::Base => ce_step(model, batch, lr),
            Stepper::Ohem(cfg) => ohem_step(model, batch, cfg, lr),
            Stepper::Danil(hp) => danil_step(model, batch, hp, lr),
        }
    }
}

/// Runs `epochs` passes of mini-batch SGD, reshuffling every epoch with a
/// seed of `shuffle_seed + epoch`.
pub fn train_epochs(
    model: &mut Model,
    data: &Dataset,
    stepper: Stepper<'_>,
    config: &RunConfig,
    shuffle_seed: u64,
) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    let t = &config.train;
    let mut records = Vec::with_capacity(t.epochs);
    for epoch in 0..t.epochs {
        let order = shuffled_indices(data.len(), shuffle_seed.wrapping_add(epoch as u64));
        let (mut l_c, mut l_d, mut l_t, mut correct) = (0.0, 0.0, 0.0, 0);
        for chunk in order.chunks(t.batch_size) {
            let batch = data.batch(chunk)?;
            let report = stepper.step(model, &batch, t.lr).map_err(|e| match e {
                Error::Sample { sample, source } => Error::Training { epoch, sample: chunk[sample], source },
                other => other,
            })?;
            for s in &report.samples {
                l_c += s.l_c_plus;
                l_d += s.l_d;
                l_t += s.l_total;
            }
            correct += report.correct();
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            mean_l_c_plus: l_c / n,
            mean_l_d: l_d / n,
            mean_l_total: l_t / n,
            train_accuracy: correct as f64 / n,
        };
        log::info!(
            "{} epoch {epoch}: L_c+ {:.6} L_d {:.6} train acc {:.4}",
            config.method.name(),
            record.mean_l_c_plus,
            record.mean_l_d,
            record.train_accuracy
        );
        records.push(record);
    }
    Ok(records)
}

/// Splits off the last `fraction` of a seeded permutation, per class, as a
/// validation set.
fn validation_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let order = shuffled_indices(data.len(), seed);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for class in 0..data.classes() {
        let members: Vec<usize> = order.iter().copied().filter(|&i| data.labels()[i].index() == class).collect();
        let held = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(1));
        let cut = members.len() - held;
        fit.extend_from_slice(&members[..cut]);
        val.extend_from_slice(&members[cut..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    if val.is_empty() {
        return Err(Error::Config("validation split is empty; raise validation_fraction".into()));
    }
    Ok((data.subset(&fit, Split::Train)?, data.subset(&val, Split::Test)?))
}

/// Trains one model per config and evaluates it on both splits. Data paths
/// in the config are resolved against `base_dir`.
pub fn run(config: &RunConfig, base_dir: &Path) -> Result<(Model, RunReport)> {
    config.validate()?;
    let started = Instant::now();
    let (train, test) = config.data.load(config.seed, base_dir)?;
    let shuffle_seed = derive_seed(config.seed, Stream::Shuffle);
    let fresh = || init_model(config.model.clone(), config.seed);

    let mut tuning = Vec::new();
    let lambda = match config.method {
        Method::Danil if !config.danil.lambda_grid.is_empty() => {
            let seed = derive_seed(config.seed, Stream::Validation);
            let (fit, val) = validation_split(&train, config.danil.validation_fraction, seed)?;
            for &lambda in &config.danil.lambda_grid {
                let mut model = fresh()?;
                let hp = config.danil.params(lambda);
                train_epochs(&mut model, &fit, Stepper::Danil(hp), config, shuffle_seed)?;
                let validation = evaluate(&model, &val)?;
                log::info!("lambda {lambda:e}: validation macro-F1 {:.4}", validation.macro_f1);
                tuning.push(TuningRecord { lambda, validation });
            }
            let best =
                tuning.iter().fold(
                    &tuning[0],
                    |best, r| if r.validation.macro_f1 > best.validation.macro_f1 { r } else { best },
                );
            Some(best.lambda)
        }
        Method::Danil => Some(config.danil.lambda),
        _ => None,
    };

    let stepper = match config.method {
        Method::Base => Stepper::Base,
        Method::Ohem => Stepper::Ohem(&config.ohem),
        Method::Danil => Stepper::Danil(config.danil.params(lambda.expect("danil has a lambda"))),
    };
    let mut model = fresh()?;
    let epochs = train_epochs(&mut model, &train, stepper, config, shuffle_seed)?;
    let report = RunReport {
        method: config.method,
        seed: config.seed,
        lambda,
        tuning,
        epochs,
        train: evaluate(&model, &train)?,
        test: evaluate(&model, &test)?,
        config: config.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
