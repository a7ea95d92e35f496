//! Comparison training steps: plain cross-entropy and batch-level online
//! hard example mining.
//!
//! Both build each sample's graph exactly as the DANIL step does, so the
//! degenerate cases agree with it bit for bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_update, Tape, VarId};
use crate::danil::{forward_sample, mean_objective, LossBreakdown, StepReport};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OhemConfig {
    /// Share of each batch, by descending loss, that enters the update.
    pub keep_fraction: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig { keep_fraction: 0.5 }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction must lie in (0, 1], got {}", self.keep_fraction)));
        }
        Ok(())
    }

    /// `ceil(keep_fraction * batch)`, at least one sample.
    pub fn keep_count(&self, batch: usize) -> usize {
        // The tolerance keeps products like 0.7 * 10 = 7.000000000000001 at 7.
        ((self.keep_fraction * batch as f64 - 1e-9).ceil() as usize).clamp(1, batch.max(1))
    }
}

/// Positions of the `k` largest losses, ties to the lower position,
/// returned in ascending position order.
pub fn select_hard(losses: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

struct Forwarded {
    tape: Tape,
    params: crate::nn::BoundParams,
    losses: Vec<VarId>,
    samples: Vec<LossBreakdown>,
}

fn forward_all(model: &Model, batch: &Batch<'_>) -> Result<Forwarded> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape)?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    for (i, (input, label)) in batch.iter().enumerate() {
        let fw = forward_sample(&mut tape, model, &params, input, label).map_err(|e| e.in_sample(i))?;
        let l = tape.value(fw.l_c_plus).data()[0];
        let predicted = tape.value(fw.logits).argmax().expect("non-empty logits");
        losses.push(fw.l_c_plus);
        samples.push(LossBreakdown {
            l_c_plus: l,
            l_d: 0.0,
            l_total: l,
            predicted,
            truth: label.index(),
            correct: predicted == label.index(),
        });
    }
    Ok(Forwarded { tape, params, losses, samples })
}

fn update(model: &mut Model, mut f: Forwarded, kept: Vec<usize>, lr: f64) -> Result<StepReport> {
    let terms: Vec<VarId> = kept.iter().map(|&i| f.losses[i]).collect();
    let objective = mean_objective(&mut f.tape, &terms)?;
    let grads = f.tape.gradients(objective, f.params.ids())?;
    sgd_update(model.parameters_mut(), &grads, lr)?;
    let objective = f.tape.value(objective).data()[0];
    Ok(StepReport { samples: f.samples, kept, objective })
}

/// One SGD step on the batch-mean softmax cross-entropy.
pub fn ce_step(model: &mut Model, batch: &Batch<'_>, lr: f64) -> Result<StepReport> {
    let f = forward_all(model, batch)?;
    update(model, f, (0..batch.len()).collect(), lr)
}

/// One SGD step on the mean cross-entropy of the hardest samples only.
pub fn ohem_step(model: &mut Model, batch: &Batch<'_>, cfg: &OhemConfig, lr: f64) -> Result<StepReport> {
    cfg.validate()?;
    let f = forward_all(model, batch)?;
    let losses: Vec<f64> = f.samples.iter().map(|s| s.l_c_plus).collect();
    let kept = select_hard(&losses, cfg.keep_count(batch.len()));
    update(model, f, kept, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_rule() {
        assert_eq!(select_hard(&[0.1, 3.0, 0.2, 2.0], 2), vec![1, 3]);
        assert_eq!(select_hard(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(select_hard(&[0.5, 2.0, 2.0, 0.1], 1), vec![1]);
    }

    #[test]
    fn keep_counts() {
        let c = |f| OhemConfig { keep_fraction: f };
        assert_eq!(c(0.5).keep_count(4), 2);
        assert_eq!(c(0.5).keep_count(5), 3);
        assert_eq!(c(0.7).keep_count(10), 7);
        assert_eq!(c(1.0).keep_count(16), 16);
        assert_eq!(c(0.01).keep_count(3), 1);
        assert!(c(0.0).validate().is_err());
        assert!(c(1.5).validate().is_err());
    }
}
