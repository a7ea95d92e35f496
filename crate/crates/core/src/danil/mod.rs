//! Distractor-aware neuron intrinsic learning.
//!
//! For each sample the network's loss gradient with respect to the input (the
//! *intrinsic response map*) is computed twice: once against the true label
//! (`A+`) and, when the sample is misclassified, once against a pseudo label
//! at the wrongly predicted class (`A-`, the distractor). The distraction loss
//! `1 / (‖A+ − A-‖² + ε)` is added to the cross-entropy with weight `λ`, and
//! the sum is differentiated with respect to the parameters *through* both
//! response maps.

mod loss;
mod saliency;
mod step;

use serde::{Deserialize, Serialize};

use crate::autodiff::VarId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use loss::{cross_entropy_with_softmax, distraction_loss, make_pseudo_label, total_loss};
pub use saliency::{export_response_map, ChannelReduce, GrayscaleImage};
pub use step::{danil_gradients, danil_step, intrinsic_response_map, StepReport};

pub(crate) use step::{forward_sample, mean_objective};

/// One-hot class label over `classes` categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label {
    classes: usize,
    index: usize,
}

impl Label {
    pub fn new(classes: usize, index: usize) -> Result<Self> {
        if index >= classes {
            return Err(Error::Domain(format!("label {index} outside {classes} classes")));
        }
        Ok(Label { classes, index })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros([self.classes]);
        t.data_mut()[self.index] = 1.0;
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// Against the ground-truth label.
    Positive,
    /// Against the pseudo label; the distractor.
    Negative,
}

/// Gradient of a classification loss with respect to the input sample.
#[derive(Clone, Debug)]
pub struct ResponseMap {
    pub tensor: Tensor,
    pub kind: MapKind,
    /// The node holding the map on the tape it was computed on.
    pub var: VarId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DanilParams {
    /// Weight of the distraction loss.
    pub lambda: f64,
    /// Stabilizer in the distraction loss denominator.
    pub eps: f64,
}

impl Default for DanilParams {
    fn default() -> Self {
        DanilParams { lambda: 1e-5, eps: 1e-4 }
    }
}

impl DanilParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be finite and > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-sample loss terms of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_c_plus: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub predicted: usize,
    pub truth: usize,
    pub correct: bool,
}
