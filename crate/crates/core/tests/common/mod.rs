//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenet::autodiff::{Graph, Var};
use sparsenet::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values in `[lo, hi]` whose magnitude is at least `gap`, for
/// functions with a kink at zero.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y * r)` for a fixed pseudo-random `r` derived from `seed`, turning
/// any tensor output into a scalar with a generic upstream gradient.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> sparsenet::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let rv = g.constant(r);
    let prod = g.mul(y, rv)?;
    g.sum(prod)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

fn loss_value<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> sparsenet::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.value(loss).item()
}

/// Relative error between reverse-mode gradients of `build` and central
/// differences of its forward value, over every element of every input.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> sparsenet::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(gt) => analytic.extend_from_slice(gt.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric.push((loss_value(&plus, &build) - loss_value(&minus, &build)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

/// AUC-ROC by counting every (in, anomaly) pair: wins score 1, ties 1/2.
pub fn pairwise_auc(in_dist: &[f64], anomalies: &[f64], high_is_anomalous: bool) -> f64 {
    let mut twice = 0u64;
    for &a in anomalies {
        for &i in in_dist {
            let (a, i) = if high_is_anomalous { (a, i) } else { (-a, -i) };
            twice += if a > i {
                2
            } else if a == i {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * anomalies.len() * in_dist.len()) as f64
}

/// AUPR with anomalies as positives: precision at each distinct threshold,
/// weighted by the recall gained there. Each threshold is evaluated by a
/// full scan.
pub fn threshold_aupr(in_dist: &[f64], anomalies: &[f64], high_is_anomalous: bool) -> f64 {
    let flip = |x: f64| if high_is_anomalous { x } else { -x };
    let mut thresholds: Vec<f64> = in_dist.iter().chain(anomalies).map(|&x| flip(x)).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let tp = anomalies.iter().filter(|&&x| flip(x) >= t).count();
        let fp = in_dist.iter().filter(|&&x| flip(x) >= t).count();
        let recall = tp as f64 / anomalies.len() as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev) * precision;
        prev = recall;
    }
    area
}

/// `ceil((1000 - permille) * n / 1000)` in integer arithmetic.
pub fn kept_oracle(n: usize, permille: usize) -> usize {
    ((1000 - permille) * n).div_ceil(1000)
}
