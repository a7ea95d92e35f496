//! Confusion matrix, macro-averaged F1 and accuracy.

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }
}

pub fn confusion(preds: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::Domain(format!("{} predictions but {} truths", preds.len(), truths.len())));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (i, (&p, &t)) in preds.iter().zip(truths).enumerate() {
        if p >= classes || t >= classes {
            return Err(Error::Domain(format!("pair {i} (truth {t}, prediction {p}) outside {classes} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

fn non_empty(cm: &ConfusionMatrix) -> Result<u64> {
    match cm.total() {
        0 => Err(Error::Domain("metric of an empty confusion matrix".into())),
        n => Ok(n),
    }
}

/// Unweighted mean of per-class F1. A class with zero precision and recall,
/// or with an undefined one, scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    non_empty(cm)?;
    let n = cm.classes();
    let total: f64 = (0..n)
        .map(|k| {
            let tp = cm.counts[k][k] as f64;
            let predicted: u64 = (0..n).map(|t| cm.counts[t][k]).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            if predicted == 0 || actual == 0 || tp == 0.0 {
                return 0.0;
            }
            let precision = tp / predicted as f64;
            let recall = tp / actual as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .sum();
    Ok(total / n as f64)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = non_empty(cm)?;
    Ok(cm.trace() as f64 / total as f64)
}
