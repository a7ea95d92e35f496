use super::Label;
use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `-log softmax(logits)[label]` for a single sample's logit vector.
///
/// The maximum logit is subtracted on the tape (as a constant) before the
/// softmax; the gradient is unchanged by the shift.
pub fn cross_entropy_with_softmax(tape: &mut Tape, logits: VarId, label: &Label) -> Result<VarId> {
    let z = tape.value(logits);
    let n = z.numel();
    let is_vector = z.rank() == 1 || (z.rank() == 2 && z.shape()[0] == 1);
    if !is_vector || n != label.classes() {
        return Err(Error::shape("cross_entropy_with_softmax", z.shape(), &[label.classes()]));
    }
    let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logits = if z.rank() == 1 { logits } else { tape.reshape(logits, [n])? };
    let m = tape.constant(Tensor::scalar(max))?;
    let shifted = tape.sub(logits, m)?;
    let p = tape.softmax(shifted, 0)?;
    let picked = tape.gather(p, vec![Some(label.index())].into(), Vec::<usize>::new())?;
    let lp = tape.log(picked)?;
    tape.neg(lp)
}

/// One-hot label at the predicted class when the prediction is wrong,
/// `None` when it is right. Arg-max ties go to the lowest index.
pub fn make_pseudo_label(logits: &Tensor, truth: &Label) -> Result<Option<Label>> {
    let n = logits.numel();
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 classes, got {n}")));
    }
    if n != truth.classes() {
        return Err(Error::shape("make_pseudo_label", logits.shape(), &[truth.classes()]));
    }
    let predicted = logits.argmax().expect("non-empty");
    if predicted == truth.index() {
        Ok(None)
    } else {
        Label::new(n, predicted).map(Some)
    }
}

/// `1 / (‖a_plus − a_minus‖² + eps)`.
pub fn distraction_loss(tape: &mut Tape, a_plus: VarId, a_minus: VarId, eps: f64) -> Result<VarId> {
    crate::autodiff::op::check_eps(eps)?;
    let (sp, sm) = (tape.value(a_plus).shape(), tape.value(a_minus).shape());
    if sp != sm {
        return Err(Error::shape("distraction_loss", sp, sm));
    }
    let d = tape.sub(a_plus, a_minus)?;
    let sq = tape.square(d)?;
    let dist = tape.sum(sq)?;
    tape.reciprocal_shift(dist, eps)
}

/// `l_c_plus + lambda * l_d`. With no distraction term, or `lambda == 0`,
/// this is `l_c_plus` itself.
pub fn total_loss(tape: &mut Tape, l_c_plus: VarId, l_d: Option<VarId>, lambda: f64) -> Result<VarId> {
    let check_scalar = |tape: &Tape, v: VarId| {
        let t = tape.value(v);
        if t.numel() == 1 {
            Ok(())
        } else {
            Err(Error::shape("total_loss", t.shape(), &[]))
        }
    };
    check_scalar(tape, l_c_plus)?;
    match l_d {
        Some(l_d) if lambda != 0.0 => {
            check_scalar(tape, l_d)?;
            let weighted = tape.scale(l_d, lambda)?;
            tape.add(l_c_plus, weighted)
        }
        Some(l_d) => check_scalar(tape, l_d).map(|_| l_c_plus),
        None => Ok(l_c_plus),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(n: usize, k: usize) -> Label {
        Label::new(n, k).unwrap()
    }

    fn ce(z: Vec<f64>, k: usize) -> f64 {
        let mut t = Tape::new();
        let n = z.len();
        let zv = t.leaf(Tensor::vector(z), true).unwrap();
        let l = cross_entropy_with_softmax(&mut t, zv, &label(n, k)).unwrap();
        t.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_log_n() {
        assert!((ce(vec![0.4; 7], 3) - 7f64.ln()).abs() < 1e-12);
        assert!((ce(vec![0.4; 7], 3) - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn one_third_probability_gives_log_three() {
        assert!((ce(vec![0.0, 2f64.ln()], 0) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_wrong_prediction_stays_finite() {
        let v = ce(vec![0.0, 600.0], 0);
        assert!((v - 600.0).abs() < 1e-9);
    }

    #[test]
    fn class_count_mismatch() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![0.0; 3]), true).unwrap();
        assert!(matches!(cross_entropy_with_softmax(&mut t, z, &label(4, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn pseudo_label_branches() {
        let z = Tensor::vector(vec![0.1, 2.0, 0.3]);
        assert_eq!(make_pseudo_label(&z, &label(3, 1)).unwrap(), None);
        assert_eq!(make_pseudo_label(&z, &label(3, 0)).unwrap(), Some(label(3, 1)));
        let tie = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(make_pseudo_label(&tie, &label(2, 0)).unwrap(), None);
        assert_eq!(make_pseudo_label(&tie, &label(2, 1)).unwrap(), Some(label(2, 0)));
        assert!(matches!(make_pseudo_label(&Tensor::vector(vec![1.0]), &label(1, 0)), Err(Error::Domain(_))));
    }

    fn ld(a: Vec<f64>, b: Vec<f64>, eps: f64) -> Result<f64> {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(a), true).unwrap();
        let b = t.leaf(Tensor::vector(b), true).unwrap();
        let l = distraction_loss(&mut t, a, b, eps)?;
        Ok(t.value(l).item().unwrap())
    }

    #[test]
    fn distraction_loss_point_values() {
        assert!((ld(vec![1.0, 2.0], vec![1.0, 2.0], 1e-4).unwrap() - 1e4).abs() < 1e-12 * 1e4);
        let v = ld(vec![1.0, 2.0], vec![1.0, 3.0], 1e-4).unwrap();
        assert!((v - 1.0 / (1.0 + 1e-4)).abs() < 1e-12);
        assert!((v - 0.99990001).abs() < 1e-8);
    }

    #[test]
    fn distraction_loss_errors() {
        assert!(matches!(ld(vec![1.0], vec![1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(ld(vec![1.0], vec![1.0, 2.0], 1e-4), Err(Error::Shape { .. })));
    }

    #[test]
    fn total_loss_cases() {
        let mut t = Tape::new();
        let lc = t.leaf(Tensor::scalar(2.0), true).unwrap();
        let ld = t.leaf(Tensor::scalar(1e4), true).unwrap();
        assert_eq!(total_loss(&mut t, lc, None, 1e-5).unwrap(), lc);
        assert_eq!(total_loss(&mut t, lc, Some(ld), 0.0).unwrap(), lc);
        let tot = total_loss(&mut t, lc, Some(ld), 1e-5).unwrap();
        assert!((t.value(tot).item().unwrap() - 2.1).abs() < 1e-12);
        let v = t.leaf(Tensor::zeros([2]), true).unwrap();
        assert!(matches!(total_loss(&mut t, v, None, 1.0), Err(Error::Shape { .. })));
    }
}
