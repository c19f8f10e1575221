//! Detection and calibration metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Which end of the score axis marks anomalies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HighIsAnomalous,
    LowIsAnomalous,
}

impl Orientation {
    fn flip(self, x: f64) -> f64 {
        match self {
            Orientation::HighIsAnomalous => x,
            Orientation::LowIsAnomalous => -x,
        }
    }
}

fn check(in_dist: &[f64], anomalies: &[f64]) -> Result<()> {
    if in_dist.is_empty() || anomalies.is_empty() {
        return Err(Error::arg("both score lists must be non-empty"));
    }
    if in_dist.iter().chain(anomalies).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN detection score".into()));
    }
    Ok(())
}

/// Probability that a random anomaly is scored more anomalous than a random
/// in-distribution input, ties counting one half. Computed exactly from
/// mid-ranks.
pub fn auroc(in_dist: &[f64], anomalies: &[f64], orientation: Orientation) -> Result<f64> {
    check(in_dist, anomalies)?;
    let mut all: Vec<(f64, bool)> = in_dist
        .iter()
        .map(|&v| (orientation.flip(v), false))
        .chain(anomalies.iter().map(|&v| (orientation.flip(v), true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of anomalies, so mid-ranks stay integers.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the mid-rank (i + 1 + j) / 2.
        let mid2 = (i + 1 + j) as u128;
        let hits = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank2_sum += mid2 * hits;
        i = j;
    }
    let (na, ni) = (anomalies.len() as u128, in_dist.len() as u128);
    // Twice the Mann-Whitney statistic: pairs won count 2, ties 1.
    let u2 = rank2_sum - na * (na + 1);
    Ok(u2 as f64 / (2 * na * ni) as f64)
}

/// Area under the precision-recall curve with anomalies as positives, by
/// step integration over every distinct threshold.
pub fn aupr(in_dist: &[f64], anomalies: &[f64], orientation: Orientation) -> Result<f64> {
    check(in_dist, anomalies)?;
    let mut all: Vec<(f64, bool)> = in_dist
        .iter()
        .map(|&v| (orientation.flip(v), false))
        .chain(anomalies.iter().map(|&v| (orientation.flip(v), true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = anomalies.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Running sum carrying the rounding error of every addition and product,
/// so the total is close to correctly rounded.
#[derive(Default)]
struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let b = s - self.hi;
        self.lo += (self.hi - (s - b)) + (x - b);
        self.hi = s;
    }

    fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.add(p);
        self.lo += a.mul_add(b, -p);
    }

    fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// Mean over rows of `sum_c (p_c - onehot_c)^2`, accumulated as
/// `sum_c p_c^2 - 2 p_y + 1` with compensated summation.
pub fn brier(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = probs.row_len();
    if labels.len() != probs.rows() {
        return Err(Error::shape("brier", format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
    }
    let mut total = Compensated::default();
    for (i, &l) in labels.iter().enumerate() {
        let row = probs.row(i);
        for &p in row {
            total.add_product(p, p);
        }
        total.add(-2.0 * row[l]);
        total.add(1.0);
    }
    Ok(total.value() / labels.len() as f64)
}

/// Largest input-output Jacobian spectral norm over the rows of `samples`,
/// each estimated by `iterations` rounds of power iteration on `J^T J`
/// (forward-mode `J v`, reverse-mode `J^T u`). Every row starts from the
/// same fixed direction, so the estimate for a row does not depend on the
/// other rows.
pub fn lipschitz_lower_bound(model: &Model, samples: &Tensor, iterations: usize) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::arg("power iteration needs at least one round"));
    }
    let n = samples.rows();
    if n == 0 {
        return Err(Error::arg("no samples"));
    }
    let d = samples.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let start: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut v = Tensor::new(samples.shape().to_vec(), start.iter().cycle().take(n * d).cloned().collect())?;
    let normalize = |t: &mut Tensor| -> Vec<f64> {
        let w = t.row_len();
        t.data_mut()
            .chunks_mut(w)
            .map(|row| {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
                norm
            })
            .collect()
    };
    normalize(&mut v);
    let mut best = vec![0.0f64; n];
    for _ in 0..iterations {
        let (_, mut jv) = model.jvp(samples, &v)?;
        let norms = normalize(&mut jv);
        for (b, s) in best.iter_mut().zip(&norms) {
            *b = b.max(*s);
        }
        // v <- J^T u with u = Jv / |Jv|.
        let mut g = Graph::new();
        let vars = model.bind_constant(&mut g);
        let xv = g.param(samples.clone());
        let out = model.forward(&mut g, xv, &vars)?;
        let u = g.constant(jv);
        let prod = g.mul(out, u)?;
        let s = g.sum(prod)?;
        let mut grads = g.backward(s)?;
        v = grads.take(xv).into_shape(samples.shape())?;
        if normalize(&mut v).iter().all(|&x| x == 0.0) {
            break;
        }
    }
    Ok(best.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    HigherBetter,
    LowerBetter,
}

/// Sparse value relative to dense, oriented so that values above 1 mean
/// the sparse model is better: `sparse / dense` for higher-better metrics,
/// `dense / sparse` for lower-better ones.
pub fn relative_metric(sparse: f64, dense: f64, kind: MetricKind) -> Result<f64> {
    let (num, den) = match kind {
        MetricKind::HigherBetter => (sparse, dense),
        MetricKind::LowerBetter => (dense, sparse),
    };
    if den == 0.0 {
        return Err(Error::arg("relative metric with a zero denominator"));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    #[test]
    fn auroc_examples() {
        let a = auroc(&[0.9, 0.8], &[0.2, 0.1], Orientation::LowIsAnomalous).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(auroc(&[0.5; 7], &[0.5; 3], Orientation::HighIsAnomalous).unwrap(), 0.5);
        let f = auroc(&[1.0, 3.0], &[2.0], Orientation::HighIsAnomalous).unwrap();
        let g = auroc(&[1.0, 3.0], &[2.0], Orientation::LowIsAnomalous).unwrap();
        assert_eq!(f + g, 1.0);
        assert!(auroc(&[], &[1.0], Orientation::HighIsAnomalous).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.1, 0.2], &[0.8, 0.9], Orientation::HighIsAnomalous).unwrap(), 1.0);
        assert!(aupr(&[0.1], &[], Orientation::HighIsAnomalous).is_err());
        // One positive ranked second of two: precision 1/2 at recall 1.
        assert_eq!(aupr(&[0.9], &[0.1], Orientation::HighIsAnomalous).unwrap(), 0.5);
    }

    #[test]
    fn brier_examples() {
        let one_hot = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(brier(&one_hot, &[1]).unwrap(), 0.0);
        let u = Tensor::full(&[1, 10], 0.1);
        assert!((brier(&u, &[3]).unwrap() - 0.9).abs() < 1e-15);
        assert!(brier(&u, &[10]).is_err());
    }

    #[test]
    fn lipschitz_of_diagonal_map() {
        let mut m = Model::new(&ModelSpec::mlp(2, &[], 2, 0)).unwrap();
        m.params[0].weight = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.0, 5.0, 2.0]).unwrap();
        assert!((lipschitz_lower_bound(&m, &x, 20).unwrap() - 3.0).abs() < 1e-6);
        m.params[0].weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((lipschitz_lower_bound(&m, &x, 5).unwrap() - 1.0).abs() < 1e-12);
        assert!(lipschitz_lower_bound(&m, &x, 0).is_err());
    }

    #[test]
    fn relative_examples() {
        assert_eq!(relative_metric(0.5, 0.5, MetricKind::HigherBetter).unwrap(), 1.0);
        assert!((relative_metric(0.45, 0.5, MetricKind::HigherBetter).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(relative_metric(0.05, 0.10, MetricKind::LowerBetter).unwrap(), 2.0);
        assert!(relative_metric(1.0, 0.0, MetricKind::HigherBetter).is_err());
    }
}
