mod common;

use common::{rng, uniform};
use proptest::prelude::*;
use sparsenet::attacks::{fgsm, input_gradient, perturb, AttackSpec, Norm};
use sparsenet::{Model, ModelSpec, Tensor};

fn row_norm(d: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => d.iter().fold(0.0, |m, v| m.max(v.abs())),
        Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

proptest! {
    #[test]
    fn perturbation_respects_budget_and_range(
        seed in any::<u64>(),
        rows in 1usize..6,
        width in 1usize..20,
        eps in 0.1f64..64.0,
        l2 in any::<bool>(),
        narrow in any::<bool>(),
    ) {
        let clamp = if narrow { (0.25, 0.75) } else { (0.0, 1.0) };
        let r = &mut rng(seed);
        let x = uniform(r, &[rows, width], clamp.0, clamp.1);
        let grad = uniform(r, &[rows, width], -1.0, 1.0).map(|g| if g.abs() < 0.2 { 0.0 } else { g });
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let spec = AttackSpec { norm, epsilon: eps, clamp };
        let adv = perturb(&x, &grad, &spec).unwrap();
        let slack = if l2 { 1e-12 } else { 1e-15 };
        for i in 0..rows {
            let d: Vec<f64> = adv.row(i).iter().zip(x.row(i)).map(|(a, b)| a - b).collect();
            prop_assert!(row_norm(&d, norm) <= spec.radius() + slack);
            prop_assert!(adv.row(i).iter().all(|&v| v >= clamp.0 && v <= clamp.1));
            if grad.row(i).iter().all(|&g| g == 0.0) {
                prop_assert_eq!(adv.row(i), x.row(i));
            }
        }
    }
}

#[test]
fn fgsm_raises_the_loss_of_a_linear_model() {
    let model = Model::new(&ModelSpec::mlp(12, &[], 4, 3)).unwrap();
    let x = uniform(&mut rng(8), &[30, 12], 0.2, 0.8);
    let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
    let loss = |x: &Tensor| {
        let p = model.predict(x).unwrap();
        -labels.iter().enumerate().map(|(i, &l)| p.row(i)[l].ln()).sum::<f64>()
    };
    for spec in [AttackSpec::linf(4.0), AttackSpec::l2(4.0)] {
        let adv = fgsm(&model, &x, Some(&labels), &spec).unwrap();
        assert!(loss(&adv) > loss(&x), "{}", spec.name());
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let model = Model::new(&ModelSpec::mlp(5, &[7], 3, 9)).unwrap();
    let x = uniform(&mut rng(2), &[4, 5], 0.0, 1.0);
    let labels = [2, 0, 1, 1];
    let loss = |x: &Tensor| {
        let p = model.predict(x).unwrap();
        -labels.iter().enumerate().map(|(i, &l)| p.row(i)[l].ln()).sum::<f64>() / 4.0
    };
    let g = input_gradient(&model, &x, &labels).unwrap();
    let h = 1e-6;
    let numeric: Vec<f64> = (0..x.len())
        .map(|j| {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[j] += h;
            b.data_mut()[j] -= h;
            (loss(&a) - loss(&b)) / (2.0 * h)
        })
        .collect();
    let err = common::rel_err(g.data(), &numeric);
    assert!(err < 1e-6, "relative error {err:e}");
}
