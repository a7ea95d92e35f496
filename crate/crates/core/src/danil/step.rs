use super::loss::{cross_entropy_with_softmax, distraction_loss, make_pseudo_label, total_loss};
use super::{DanilParams, Label, LossBreakdown, MapKind, ResponseMap};
use crate::autodiff::{sgd_update, Tape, VarId};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Model};
use crate::tensor::Tensor;

/// Outcome of one optimizer step over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Loss terms for every sample, in batch order.
    pub samples: Vec<LossBreakdown>,
    /// Batch positions whose loss entered the objective, ascending.
    pub kept: Vec<usize>,
    /// The value that was differentiated.
    pub objective: f64,
}

impl StepReport {
    pub fn correct(&self) -> usize {
        self.samples.iter().filter(|s| s.correct).count()
    }

    fn mean(&self, f: impl Fn(&LossBreakdown) -> f64) -> f64 {
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_l_c_plus(&self) -> f64 {
        self.mean(|s| s.l_c_plus)
    }

    pub fn mean_l_d(&self) -> f64 {
        self.mean(|s| s.l_d)
    }

    pub fn mean_l_total(&self) -> f64 {
        self.mean(|s| s.l_total)
    }
}

/// One sample pushed through the model on a shared tape.
pub(crate) struct SampleForward {
    /// The sample as a differentiable leaf, in its own (unbatched) shape.
    pub x: VarId,
    pub logits: VarId,
    pub l_c_plus: VarId,
}

pub(crate) fn forward_sample(
    tape: &mut Tape,
    model: &Model,
    params: &BoundParams,
    input: &Tensor,
    label: &Label,
) -> Result<SampleForward> {
    let x = tape.leaf(input.clone(), true)?;
    let mut batched = vec![1];
    batched.extend_from_slice(input.shape());
    let xb = tape.reshape(x, batched)?;
    let z = model.forward(tape, params, xb)?;
    let logits = tape.reshape(z, [model.classes()])?;
    let l_c_plus = cross_entropy_with_softmax(tape, logits, label)?;
    Ok(SampleForward { x, logits, l_c_plus })
}

/// Mean of scalar nodes, summed in the given order.
pub(crate) fn mean_objective(tape: &mut Tape, terms: &[VarId]) -> Result<VarId> {
    let (&first, rest) = terms.split_first().ok_or_else(|| Error::Domain("objective over zero samples".into()))?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

fn scalar(tape: &Tape, v: VarId) -> f64 {
    tape.value(v).data()[0]
}

/// Gradient of the input-space loss `-log softmax(f(x))[label]` with
/// respect to the leaf `x`, which holds a single unbatched sample.
///
/// With `record = true` the map is itself a node on `tape`, so any loss built
/// from it can be differentiated again with respect to the parameters.
#[allow(clippy::too_many_arguments)]
pub fn intrinsic_response_map(
    tape: &mut Tape,
    model: &Model,
    params: &BoundParams,
    x: VarId,
    label: &Label,
    kind: MapKind,
    record: bool,
) -> Result<ResponseMap> {
    let mut batched = vec![1];
    batched.extend_from_slice(tape.value(x).shape());
    let xb = tape.reshape(x, batched)?;
    let z = model.forward(tape, params, xb)?;
    let logits = tape.reshape(z, [model.classes()])?;
    let loss = cross_entropy_with_softmax(tape, logits, label)?;
    let var = tape.backward(loss, &[x], record)?[0];
    Ok(ResponseMap { tensor: tape.value(var).clone(), kind, var })
}

/// Parameter gradients of the batch-mean total loss, without updating.
pub fn danil_gradients(model: &Model, batch: &Batch<'_>, hp: &DanilParams) -> Result<(Vec<Tensor>, StepReport)> {
    hp.validate()?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape)?;
    let mut totals = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    for (i, (input, label)) in batch.iter().enumerate() {
        let (total, breakdown) =
            danil_sample(&mut tape, model, &params, input, label, hp).map_err(|e| e.in_sample(i))?;
        totals.push(total);
        samples.push(breakdown);
    }
    let objective = mean_objective(&mut tape, &totals)?;
    let grads = tape.gradients(objective, params.ids())?;
    let report = StepReport { samples, kept: (0..batch.len()).collect(), objective: scalar(&tape, objective) };
    Ok((grads, report))
}

/// One SGD step on the batch-mean of `L_c+ + λ·L_d`.
pub fn danil_step(model: &mut Model, batch: &Batch<'_>, hp: &DanilParams, lr: f64) -> Result<StepReport> {
    let (grads, report) = danil_gradients(model, batch, hp)?;
    sgd_update(model.parameters_mut(), &grads, lr)?;
    Ok(report)
}

fn danil_sample(
    tape: &mut Tape,
    model: &Model,
    params: &BoundParams,
    input: &Tensor,
    label: &Label,
    hp: &DanilParams,
) -> Result<(VarId, LossBreakdown)> {
    let fw = forward_sample(tape, model, params, input, label)?;
    let predicted = tape.value(fw.logits).argmax().expect("non-empty logits");
    let l_d = match make_pseudo_label(tape.value(fw.logits), label)? {
        None => None,
        Some(pseudo) => {
            let l_c_minus = cross_entropy_with_softmax(tape, fw.logits, &pseudo)?;
            let a_plus = tape.backward(fw.l_c_plus, &[fw.x], true)?[0];
            let a_minus = tape.backward(l_c_minus, &[fw.x], true)?[0];
            Some(distraction_loss(tape, a_plus, a_minus, hp.eps)?)
        }
    };
    let total = total_loss(tape, fw.l_c_plus, l_d, hp.lambda)?;
    let breakdown = LossBreakdown {
        l_c_plus: scalar(tape, fw.l_c_plus),
        l_d: l_d.map_or(0.0, |v| scalar(tape, v)),
        l_total: scalar(tape, total),
        predicted,
        truth: label.index(),
        correct: predicted == label.index(),
    };
    Ok((total, breakdown))
}
