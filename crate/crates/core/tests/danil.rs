mod common;

use common::{
    argmax, central_diff, cross_entropy, flatten, random_tensor, rel_err, softmax, top_margin, unflatten, RefMlp,
};
use danil::autodiff::Tape;
use danil::baselines::{ce_step, ohem_step, OhemConfig};
use danil::danil::{
    cross_entropy_with_softmax, danil_gradients, danil_step, intrinsic_response_map, DanilParams, Label, MapKind,
};
use danil::data::Batch;
use danil::nn::{init_model, ConvBlock, Model, ModelConfig, SmallCnnConfig};
use danil::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

fn param_vecs(model: &Model) -> Vec<Vec<f64>> {
    model.parameters().iter().map(|p| p.value().data().to_vec()).collect()
}

fn shapes(model: &Model) -> Vec<Vec<usize>> {
    model.parameters().iter().map(|p| p.shape().to_vec()).collect()
}

/// `L_c+ + λ·L_d` for one sample, from closed-form input gradients.
fn oracle_total(widths: &[usize], params: &[Vec<f64>], x: &[f64], y: usize, hp: &DanilParams) -> f64 {
    let net = RefMlp { widths, params };
    let z = net.forward(x).logits;
    let l_c = cross_entropy(&z, y);
    let pred = argmax(&z);
    if pred == y {
        return l_c;
    }
    let a_plus = net.input_grad(x, y);
    let a_minus = net.input_grad(x, pred);
    let dist: f64 = a_plus.iter().zip(&a_minus).map(|(p, m)| (p - m) * (p - m)).sum();
    l_c + hp.lambda / (dist + hp.eps)
}

/// Away from relu kinks and arg-max flips, so finite differences are valid.
fn smooth_at(widths: &[usize], params: &[Vec<f64>], x: &[f64]) -> bool {
    let fw = RefMlp { widths, params }.forward(x);
    let hidden = &fw.pre[..fw.pre.len() - 1];
    hidden.iter().flatten().all(|v| v.abs() > 1e-3) && top_margin(&fw.logits) > 1e-3
}

fn fd_against_oracle(widths: &[usize], seeds: std::ops::Range<u64>, hp: DanilParams, batch: usize) -> usize {
    let mut checked = 0;
    for seed in seeds {
        let model = init_model(ModelConfig::mlp(widths.to_vec()), seed).unwrap();
        let mut rng = SplitMix64::seed_from_u64(seed ^ 0xabc);
        let xs: Vec<Tensor> = (0..batch).map(|_| random_tensor(&mut rng, &[widths[0]])).collect();
        let params = param_vecs(&model);
        let preds = model.predict(&xs.iter().collect::<Vec<_>>()).unwrap();
        // The first sample is always misclassified; the rest are random.
        let ys: Vec<usize> =
            preds
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    if i == 0 {
                        (p + 1) % widths[widths.len() - 1]
                    } else {
                        rng.random_range(0..*widths.last().unwrap())
                    }
                })
                .collect();
        if !xs.iter().all(|x| smooth_at(widths, &params, x.data())) {
            continue;
        }
        let classes = *widths.last().unwrap();
        let labels: Vec<Label> = ys.iter().map(|&y| Label::new(classes, y).unwrap()).collect();
        let b = Batch::new(xs.iter().collect(), labels).unwrap();
        let (grads, report) = danil_gradients(&model, &b, &hp).unwrap();
        let mean = |flat: &[f64]| {
            let ps: Vec<Vec<f64>> = unflatten(flat, &shapes(&model)).into_iter().map(Tensor::into_data).collect();
            xs.iter().zip(&ys).map(|(x, &y)| oracle_total(widths, &ps, x.data(), y, &hp)).sum::<f64>() / batch as f64
        };
        let flat = flatten(&model.parameters().iter().map(|p| p.value().clone()).collect::<Vec<_>>());
        assert!((report.objective - mean(&flat)).abs() < 1e-10 * mean(&flat).abs().max(1.0));
        let fd = central_diff(mean, &flat, 1e-6);
        let err = rel_err(&flatten(&grads), &fd);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
        checked += 1;
    }
    checked
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let hp = DanilParams { lambda: 1.0, eps: 1e-4 };
    assert!(fd_against_oracle(&[2, 3, 2], 0..40, hp, 1) >= 10);
}

#[test]
fn batch_mean_gradient_matches_finite_differences() {
    let hp = DanilParams { lambda: 0.5, eps: 1e-4 };
    assert!(fd_against_oracle(&[3, 5, 4], 0..40, hp, 4) >= 3);
}

#[test]
fn distraction_gradient_flows_through_both_maps() {
    let widths = [2, 4, 3];
    let mut checked = 0;
    for seed in 0..40u64 {
        let model = init_model(ModelConfig::mlp(widths), seed).unwrap();
        let mut rng = SplitMix64::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[2]);
        let params = param_vecs(&model);
        if !smooth_at(&widths, &params, x.data()) {
            continue;
        }
        let pred = model.predict(&[&x]).unwrap()[0];
        let y = (pred + 1) % 3;
        let b = Batch::new(vec![&x], vec![Label::new(3, y).unwrap()]).unwrap();
        let with = danil_gradients(&model, &b, &DanilParams { lambda: 1.0, eps: 1e-4 }).unwrap().0;
        let without = danil_gradients(&model, &b, &DanilParams { lambda: 0.0, eps: 1e-4 }).unwrap().0;
        let diff: Vec<f64> = flatten(&with).iter().zip(flatten(&without)).map(|(a, b)| a - b).collect();
        let l_d = |flat: &[f64]| {
            let ps: Vec<Vec<f64>> = unflatten(flat, &shapes(&model)).into_iter().map(Tensor::into_data).collect();
            let hp = DanilParams { lambda: 1.0, eps: 1e-4 };
            oracle_total(&widths, &ps, x.data(), y, &hp)
                - cross_entropy(&RefMlp { widths: &widths, params: &ps }.forward(x.data()).logits, y)
        };
        let flat: Vec<f64> = params.concat();
        let fd = central_diff(l_d, &flat, 1e-6);
        assert!(fd.iter().any(|v| v.abs() > 1e-6), "distraction term has no parameter gradient");
        let err = rel_err(&diff, &fd);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn linear_model_map_has_closed_form() {
    let model = init_model(ModelConfig::mlp([4, 3]), 5).unwrap();
    let w = model.parameters()[0].value().data().to_vec();
    let b = model.parameters()[1].value().data().to_vec();
    let x = [0.3, -0.7, 1.1, 0.2];
    for y in 0..3 {
        let z: Vec<f64> = (0..3).map(|j| (0..4).map(|i| x[i] * w[i * 3 + j]).sum::<f64>() + b[j]).collect();
        let p = softmax(&z);
        let expect: Vec<f64> =
            (0..4).map(|i| (0..3).map(|j| w[i * 3 + j] * (p[j] - if j == y { 1.0 } else { 0.0 })).sum()).collect();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape).unwrap();
        let xv = tape.leaf(Tensor::vector(x.to_vec()), true).unwrap();
        let map = intrinsic_response_map(
            &mut tape,
            &model,
            &params,
            xv,
            &Label::new(3, y).unwrap(),
            MapKind::Positive,
            false,
        )
        .unwrap();
        assert_eq!(map.kind, MapKind::Positive);
        assert!(rel_err(map.tensor.data(), &expect) < 1e-12);
    }
}

#[test]
fn cnn_map_matches_finite_differences() {
    let config = ModelConfig::Cnn(SmallCnnConfig {
        input: [1, 6, 6],
        blocks: vec![ConvBlock { out_channels: 2, kernel: 3, stride: 1, padding: 1, pool: 2 }],
        classes: 3,
    });
    for seed in 0..3 {
        let model = init_model(config.clone(), seed).unwrap();
        let mut rng = SplitMix64::seed_from_u64(100 + seed);
        let x = random_tensor(&mut rng, &[1, 6, 6]);
        let label = Label::new(3, seed as usize % 3).unwrap();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape).unwrap();
        let xv = tape.leaf(x.clone(), true).unwrap();
        let map = intrinsic_response_map(&mut tape, &model, &params, xv, &label, MapKind::Positive, true).unwrap();
        assert_eq!(map.tensor.shape(), &[1, 6, 6]);
        let loss = |flat: &[f64]| {
            let probe = Tensor::new([1, 6, 6], flat.to_vec()).unwrap();
            cross_entropy(model.logits(&[&probe]).unwrap().data(), label.index())
        };
        let fd = central_diff(loss, x.data(), 1e-6);
        let err = rel_err(map.tensor.data(), &fd);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

fn map_of_scaled_loss(model: &Model, x: &Tensor, label: &Label, c: f64) -> Tensor {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape).unwrap();
    let xv = tape.leaf(x.clone(), true).unwrap();
    let xb = tape.reshape(xv, [1, x.numel()]).unwrap();
    let z = model.forward(&mut tape, &params, xb).unwrap();
    let z = tape.reshape(z, [label.classes()]).unwrap();
    let l = cross_entropy_with_softmax(&mut tape, z, label).unwrap();
    let l = tape.scale(l, c).unwrap();
    tape.gradients(l, &[xv]).unwrap().remove(0)
}

#[test]
fn scaling_the_loss_scales_the_map() {
    let model = init_model(ModelConfig::mlp([5, 6, 3]), 2).unwrap();
    let x = Tensor::vector(vec![0.1, -0.2, 0.3, 0.9, -1.0]);
    let label = Label::new(3, 2).unwrap();
    let base = map_of_scaled_loss(&model, &x, &label, 1.0);
    let by4 = map_of_scaled_loss(&model, &x, &label, 4.0);
    assert!(by4.bit_eq(&base.map(|v| 4.0 * v)));
    let by3 = map_of_scaled_loss(&model, &x, &label, 3.0);
    assert!(rel_err(by3.data(), base.map(|v| 3.0 * v).data()) < 1e-15);
}

struct Fixture {
    inputs: Vec<Tensor>,
    labels: Vec<Label>,
}

impl Fixture {
    fn batch(&self) -> Batch<'_> {
        Batch::new(self.inputs.iter().collect(), self.labels.clone()).unwrap()
    }
}

fn random_fixture(model: &Model, seed: u64, size: usize) -> Fixture {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let shape = model.config().input_shape();
    let n = model.classes();
    let inputs = (0..size).map(|_| random_tensor(&mut rng, &shape)).collect();
    let labels = (0..size).map(|_| Label::new(n, rng.random_range(0..n)).unwrap()).collect();
    Fixture { inputs, labels }
}

fn models() -> Vec<Model> {
    let cnn = ModelConfig::Cnn(SmallCnnConfig {
        input: [1, 5, 5],
        blocks: vec![ConvBlock { out_channels: 2, kernel: 2, stride: 1, padding: 0, pool: 2 }],
        classes: 3,
    });
    let mut out: Vec<Model> = (0..8).map(|s| init_model(ModelConfig::mlp([4, 6, 3]), s).unwrap()).collect();
    out.extend((0..2).map(|s| init_model(cnn.clone(), s).unwrap()));
    out
}

fn same_parameters(a: &Model, b: &Model) -> bool {
    a.parameters().iter().zip(b.parameters()).all(|(x, y)| x.value().bit_eq(y.value()))
}

#[test]
fn zero_lambda_is_plain_cross_entropy() {
    for (i, model) in models().into_iter().enumerate() {
        let fx = random_fixture(&model, i as u64, 6);
        let (mut a, mut b) = (model.clone(), model);
        let ra = danil_step(&mut a, &fx.batch(), &DanilParams { lambda: 0.0, eps: 1e-4 }, 0.01).unwrap();
        ce_step(&mut b, &fx.batch(), 0.01).unwrap();
        assert!(ra.correct() < 6, "fixture should contain misclassified samples");
        assert!(same_parameters(&a, &b));
    }
}

#[test]
fn fully_correct_batch_is_plain_cross_entropy() {
    for (i, model) in models().into_iter().enumerate() {
        let mut fx = random_fixture(&model, 50 + i as u64, 6);
        let preds = model.predict(&fx.inputs.iter().collect::<Vec<_>>()).unwrap();
        fx.labels = preds.iter().map(|&p| Label::new(model.classes(), p).unwrap()).collect();
        let (mut a, mut b) = (model.clone(), model);
        let report = danil_step(&mut a, &fx.batch(), &DanilParams::default(), 0.01).unwrap();
        ce_step(&mut b, &fx.batch(), 0.01).unwrap();
        assert_eq!(report.correct(), 6);
        assert!(report.samples.iter().all(|s| s.l_d == 0.0 && s.l_total == s.l_c_plus));
        assert!(same_parameters(&a, &b));
    }
}

#[test]
fn full_keep_fraction_is_plain_cross_entropy() {
    for (i, model) in models().into_iter().enumerate() {
        let fx = random_fixture(&model, 90 + i as u64, 7);
        let (mut a, mut b) = (model.clone(), model);
        let report = ohem_step(&mut a, &fx.batch(), &OhemConfig { keep_fraction: 1.0 }, 0.01).unwrap();
        ce_step(&mut b, &fx.batch(), 0.01).unwrap();
        assert_eq!(report.kept, (0..7).collect::<Vec<_>>());
        assert!(same_parameters(&a, &b));
    }
}

#[test]
fn ohem_updates_on_the_hard_samples_only() {
    let cfg = OhemConfig { keep_fraction: 0.4 };
    for (i, model) in models().into_iter().enumerate() {
        let fx = random_fixture(&model, 200 + i as u64, 8);
        let logits = model.logits(&fx.inputs.iter().collect::<Vec<_>>()).unwrap();
        let losses: Vec<f64> =
            logits.data().chunks(model.classes()).zip(&fx.labels).map(|(z, l)| cross_entropy(z, l.index())).collect();
        let k = 4;
        // Sample i is kept iff fewer than k samples outrank it.
        let expected: Vec<usize> = (0..8)
            .filter(|&a| (0..8).filter(|&b| losses[b] > losses[a] || (losses[b] == losses[a] && b < a)).count() < k)
            .collect();
        let mut a = model.clone();
        let report = ohem_step(&mut a, &fx.batch(), &cfg, 0.01).unwrap();
        assert_eq!(report.kept, expected);
        let hard = Fixture {
            inputs: expected.iter().map(|&j| fx.inputs[j].clone()).collect(),
            labels: expected.iter().map(|&j| fx.labels[j]).collect(),
        };
        let mut b = model;
        ce_step(&mut b, &hard.batch(), 0.01).unwrap();
        assert!(same_parameters(&a, &b));
    }
}

#[test]
fn ce_loss_is_the_mean_of_direct_evaluations() {
    for (i, model) in models().into_iter().enumerate() {
        let fx = random_fixture(&model, 300 + i as u64, 5);
        let logits = model.logits(&fx.inputs.iter().collect::<Vec<_>>()).unwrap();
        let direct: f64 = logits
            .data()
            .chunks(model.classes())
            .zip(&fx.labels)
            .map(|(z, l)| cross_entropy(z, l.index()))
            .sum::<f64>()
            / 5.0;
        let mut m = model;
        let report = ce_step(&mut m, &fx.batch(), 0.01).unwrap();
        assert!((report.objective - direct).abs() < 1e-12);
        assert!((report.mean_l_c_plus() - direct).abs() < 1e-12);
        assert!(report.samples.iter().all(|s| s.l_d == 0.0));
    }
}

#[test]
fn small_lambda_deltas_converge_linearly() {
    let mut ratios = Vec::new();
    for (i, model) in models().into_iter().take(8).enumerate() {
        let fx = random_fixture(&model, 400 + i as u64, 6);
        let mut plain = model.clone();
        ce_step(&mut plain, &fx.batch(), 0.01).unwrap();
        let gap = |lambda: f64| {
            let mut m = model.clone();
            danil_step(&mut m, &fx.batch(), &DanilParams { lambda, eps: 1e-4 }, 0.01).unwrap();
            m.parameters()
                .iter()
                .zip(plain.parameters())
                .flat_map(|(a, b)| a.value().data().iter().zip(b.value().data()).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max)
        };
        let (big, small) = (gap(1e-8), gap(1e-10));
        assert!(big > 0.0 && small > 0.0);
        ratios.push(big / small);
    }
    for r in ratios {
        assert!((50.0..=200.0).contains(&r), "delta ratio {r} is not ~100");
    }
}

#[test]
fn breakdown_identity_holds() {
    let hp = DanilParams { lambda: 0.3, eps: 1e-4 };
    for (i, model) in models().into_iter().enumerate() {
        let fx = random_fixture(&model, 500 + i as u64, 6);
        let mut m = model;
        let report = danil_step(&mut m, &fx.batch(), &hp, 0.01).unwrap();
        for s in &report.samples {
            assert!((s.l_total - (s.l_c_plus + hp.lambda * s.l_d)).abs() < 1e-12);
            assert_eq!(s.correct, s.predicted == s.truth);
            if s.correct {
                assert_eq!(s.l_d, 0.0);
            } else {
                assert!(s.l_d > 0.0);
            }
        }
        assert!((report.objective - report.mean_l_total()).abs() < 1e-12);
    }
}

#[test]
fn overflowing_maps_fail_naming_the_sample() {
    // A linear model with enormous weights: logits stay small for tiny
    // inputs, but the response maps scale with the weights and their
    // squared distance overflows.
    let w = Tensor::new([2, 2], vec![1e200, -1e200, -1e200, 1e200]).unwrap();
    let model = Model::from_parameters(ModelConfig::mlp([2, 2]), vec![w, Tensor::zeros([2])], 0).unwrap();
    let ok = Tensor::vector(vec![1e-210, 0.0]);
    let bad = Tensor::vector(vec![1e-210, 0.0]);
    let labels = vec![Label::new(2, 0).unwrap(), Label::new(2, 1).unwrap()];
    let b = Batch::new(vec![&ok, &bad], labels).unwrap();
    let err = danil_gradients(&model, &b, &DanilParams::default()).unwrap_err();
    match &err {
        Error::Sample { sample: 1, source } => assert!(matches!(**source, Error::NonFinite { .. }), "{source}"),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("sample 1"));
}

#[test]
fn bad_hyperparameters_are_rejected() {
    let model = init_model(ModelConfig::mlp([2, 2]), 0).unwrap();
    let x = Tensor::vector(vec![0.0, 1.0]);
    let b = Batch::new(vec![&x], vec![Label::new(2, 0).unwrap()]).unwrap();
    for hp in [DanilParams { lambda: -1.0, eps: 1e-4 }, DanilParams { lambda: 1.0, eps: 0.0 }] {
        assert!(matches!(danil_gradients(&model, &b, &hp), Err(Error::Config(_))));
    }
    let mut m = model;
    assert!(matches!(ce_step(&mut m, &b, -0.1), Err(Error::Domain(_))));
}
