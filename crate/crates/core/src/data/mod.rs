//! Datasets, batching, and loaders for small classification problems.

mod csv;
mod idx;
mod synthetic;

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::danil::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::csv::{load_csv, parse_csv};
pub use idx::{encode_idx, load_idx, parse_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticSpec, TRAIN_FRACTION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Not (yet) split, e.g. freshly loaded from a file.
    Full,
}

/// Labelled samples sharing one shape and one class count.
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    labels: Vec<Label>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<Label>, classes: usize, split: Split) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Domain(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::shape("dataset", bad.shape(), first.shape()));
            }
        }
        if let Some(l) = labels.iter().find(|l| l.classes() != classes) {
            return Err(Error::Domain(format!("label over {} classes in a {classes}-class dataset", l.classes())));
        }
        Ok(Dataset { inputs, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Shape of one sample, if there is one.
    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }

    /// A new dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let pick = |i: usize| {
            self.inputs
                .get(i)
                .map(|t| (t.clone(), self.labels[i]))
                .ok_or_else(|| Error::Domain(format!("sample {i} outside a dataset of {}", self.len())))
        };
        let (inputs, labels) = indices.iter().map(|&i| pick(i)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Dataset::new(inputs, labels, self.classes, split)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<'_>> {
        let mut inputs = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.push(self.inputs.get(i).ok_or_else(|| Error::Domain(format!("sample {i} out of range")))?);
        }
        Batch::new(inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Truth ordinals, in sample order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(Label::index).collect()
    }
}

/// Borrowed mini-batch: samples and their labels, aligned.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    inputs: Vec<&'a Tensor>,
    labels: Vec<Label>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a Tensor>, labels: Vec<Label>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Domain(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        let shape = inputs[0].shape();
        if let Some(bad) = inputs.iter().find(|t| t.shape() != shape) {
            return Err(Error::shape("batch", bad.shape(), shape));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[&'a Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a Tensor, &Label)> + '_ {
        self.inputs.iter().copied().zip(&self.labels)
    }
}

/// Seeded Fisher-Yates permutation of `0..n`.
///
/// Each swap index is drawn as the high 64 bits of `u * (i + 1)` for a raw
/// SplitMix64 output `u`, so the permutation depends only on the seed.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        idx.swap(i, j);
    }
    idx
}
