mod common;

use common::{pairwise_auc, rng, threshold_aupr, uniform};
use proptest::prelude::*;
use sparsenet::data::synth_digits;
use sparsenet::detect::{aupr, auroc, brier, lipschitz_lower_bound, Orientation};
use sparsenet::train::{fit, predict_all, TrainConfig};
use sparsenet::{Model, ModelSpec, Tensor};

fn scores(len: std::ops::Range<usize>, levels: u32) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0..levels).prop_map(|v| v as f64 / 4.0), len)
}

proptest! {
    #[test]
    fn auroc_counts_ordered_pairs(a in scores(1..40, 12), b in scores(1..40, 12)) {
        for (o, high) in [(Orientation::HighIsAnomalous, true), (Orientation::LowIsAnomalous, false)] {
            prop_assert_eq!(auroc(&a, &b, o).unwrap(), pairwise_auc(&a, &b, high));
        }
    }

    #[test]
    fn aupr_matches_threshold_sweep(a in scores(1..40, 12), b in scores(1..40, 12)) {
        for (o, high) in [(Orientation::HighIsAnomalous, true), (Orientation::LowIsAnomalous, false)] {
            let got = aupr(&a, &b, o).unwrap();
            let want = threshold_aupr(&a, &b, high);
            prop_assert!((got - want).abs() <= 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn auroc_orientations_are_complementary(a in scores(1..30, 50), b in scores(1..30, 50)) {
        let hi = auroc(&a, &b, Orientation::HighIsAnomalous).unwrap();
        let lo = auroc(&a, &b, Orientation::LowIsAnomalous).unwrap();
        prop_assert!((hi + lo - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn permuted_labels_score_worse_brier() {
    let train = synth_digits(2000, 1).unwrap();
    let test = synth_digits(500, 2).unwrap();
    let mut m = Model::new(&ModelSpec::mlp(784, &[64], 10, 0)).unwrap();
    fit(&mut m, &train, &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
    let probs = predict_all(&m, &test.inputs).unwrap();
    let labels = test.labels().unwrap();
    let right = brier(&probs, labels).unwrap();
    for shift in 1..10 {
        let wrong: Vec<usize> = labels.iter().map(|l| (l + shift) % 10).collect();
        assert!(brier(&probs, &wrong).unwrap() >= right, "shift {shift}");
    }
}

/// Spectral norm of the explicit Jacobian of one input row, built column by
/// column from forward-mode products with the basis vectors.
fn jacobian_norm(model: &Model, row: &[f64]) -> f64 {
    let d = row.len();
    let x = Tensor::new(vec![d, d], row.iter().cycle().take(d * d).cloned().collect()).unwrap();
    let mut basis = Tensor::zeros(&[d, d]);
    for i in 0..d {
        basis.data_mut()[i * d + i] = 1.0;
    }
    let (_, cols) = model.jvp(&x, &basis).unwrap();
    let k = cols.row_len();
    // cols row i is J e_i, so it is column i of J.
    let j = nalgebra::DMatrix::from_fn(k, d, |r, c| cols.row(c)[r]);
    j.singular_values().iter().cloned().fold(0.0, f64::max)
}

#[test]
fn lipschitz_bound_matches_explicit_jacobians() {
    for (seed, spec) in [
        (0u64, ModelSpec::mlp(20, &[16], 5, 0)),
        (1, ModelSpec::mlp(50, &[30, 20], 10, 1)),
        (2, ModelSpec::mlp(8, &[12, 12, 12], 3, 2)),
    ] {
        let model = Model::new(&spec).unwrap();
        let x = uniform(&mut rng(seed), &[6, spec.input_len()], 0.0, 1.0);
        let want = (0..6).map(|i| jacobian_norm(&model, x.row(i))).fold(0.0, f64::max);
        let got = lipschitz_lower_bound(&model, &x, 200).unwrap();
        assert!(got <= want * (1.0 + 1e-9), "bound {got} above true norm {want}");
        assert!((got - want).abs() <= 1e-4 * want, "seed {seed}: {got} vs {want}");
    }
}
