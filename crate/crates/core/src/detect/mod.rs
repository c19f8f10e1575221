//! Anomaly scores for inputs: maximum softmax probability, GradNorm, and
//! SensNorm, the standardized weight-sensitivity norm.
//!
//! SensNorm compares the sensitivities `w * dL/dw` of a test batch with
//! their per-weight mean and standard deviation over training batches:
//! `z = (s - mu) / max(sigma, floor)`, `S = ||z||_p`.

mod metrics;

pub use metrics::{aupr, auroc, brier, lipschitz_lower_bound, relative_metric, MetricKind, Orientation};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph};
use crate::data::augment::augmented_batch;
use crate::data::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{one_hot, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Targets of the loss whose weight gradients define sensitivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityLoss {
    /// True labels while fitting, the model's argmax predictions at test time.
    #[default]
    PseudoLabel,
    /// Uniform targets both while fitting and at test time.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub mean: Vec<Tensor>,
    pub std: Vec<Tensor>,
    pub batch_size: usize,
    pub p: f64,
    pub sigma_floor: f64,
    pub loss: SensitivityLoss,
    /// Number of batches the statistics were computed from.
    pub batches: usize,
}

/// Raw sensitivities `w * dL/dw` of every weight tensor for mean
/// cross-entropy on `x` against `targets` (rows are distributions).
pub fn raw_sensitivity(model: &Model, x: &Tensor, targets: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = model.bind_trainable(&mut g)?;
    let xv = g.constant(x.clone());
    let logits = model.forward(&mut g, xv, &bound.vars)?;
    let loss = g.cross_entropy(logits, targets)?;
    let mut grads = g.backward(loss)?;
    model
        .params
        .iter()
        .zip(&bound.weights)
        .map(|(p, &w)| p.masked_weight().mul(&grads.take(w)))
        .collect()
}

fn fit_targets(model: &Model, labels: &[usize], loss: SensitivityLoss) -> Tensor {
    let c = model.spec.classes;
    match loss {
        SensitivityLoss::PseudoLabel => one_hot(labels, c),
        SensitivityLoss::Uniform => Tensor::full(&[labels.len(), c], 1.0 / c as f64),
    }
}

fn test_targets(model: &Model, x: &Tensor, loss: SensitivityLoss) -> Result<Tensor> {
    let c = model.spec.classes;
    Ok(match loss {
        SensitivityLoss::PseudoLabel => one_hot(&model.logits(x)?.argmax_rows(), c),
        SensitivityLoss::Uniform => Tensor::full(&[x.rows(), c], 1.0 / c as f64),
    })
}

/// Per-weight running mean and population standard deviation (Welford).
struct Moments {
    mean: Vec<Tensor>,
    m2: Vec<Tensor>,
    count: usize,
}

impl Moments {
    fn new(model: &Model) -> Self {
        let zeros = || model.params.iter().map(|p| Tensor::zeros(p.weight.shape())).collect();
        Moments { mean: zeros(), m2: zeros(), count: 0 }
    }

    fn push(&mut self, s: &[Tensor]) -> Result<()> {
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), t) in self.mean.iter_mut().zip(&mut self.m2).zip(s) {
            t.same_shape(mean, "profile")?;
            for ((mu, q), &x) in mean.data_mut().iter_mut().zip(m2.data_mut()).zip(t.data()) {
                let delta = x - *mu;
                *mu += delta / n;
                *q += delta * (x - *mu);
            }
        }
        Ok(())
    }

    fn finish(self, batch_size: usize, cfg: &DetectConfig) -> Result<SensitivityProfile> {
        if self.count < 2 {
            return Err(Error::arg(format!("a sensitivity profile needs at least 2 batches, got {}", self.count)));
        }
        let n = self.count as f64;
        let std = self.m2.iter().map(|q| q.map(|q| (q / n).max(0.0).sqrt())).collect();
        Ok(SensitivityProfile {
            mean: self.mean,
            std,
            batch_size,
            p: cfg.p,
            sigma_floor: cfg.sigma_floor,
            loss: cfg.loss,
            batches: self.count,
        })
    }
}

fn default_p() -> f64 {
    5.0
}
fn default_k() -> usize {
    15
}
fn default_floor() -> f64 {
    SIGMA_FLOOR
}
fn default_batch_sizes() -> Vec<usize> {
    vec![100, 5, 2, 1]
}
fn default_eval_batches() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    /// Augmented copies per sample for batch-size-1 scoring.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_floor")]
    pub sigma_floor: f64,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub loss: SensitivityLoss,
    /// Test batches drawn per family and batch size.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Leading training samples used to fit the single-sample profile;
    /// `None` uses all of them.
    #[serde(default)]
    pub profile_samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            p: default_p(),
            k: default_k(),
            sigma_floor: SIGMA_FLOOR,
            batch_sizes: default_batch_sizes(),
            loss: SensitivityLoss::default(),
            eval_batches: default_eval_batches(),
            profile_samples: None,
            seed: 0,
        }
    }
}

/// Fits the profile over consecutive training batches of `batch_size`
/// (a trailing partial batch is dropped).
pub fn fit_profile(model: &Model, train: &Dataset, batch_size: usize, cfg: &DetectConfig) -> Result<SensitivityProfile> {
    let labels = train.labels()?;
    let mut m = Moments::new(model);
    for idx in train.batch_indices(batch_size, None, true) {
        let x = train.inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        m.push(&raw_sensitivity(model, &x, &fit_targets(model, &y, cfg.loss))?)?;
    }
    m.finish(batch_size, cfg)
}

/// Profile for single-sample scoring: each training sample (or the first
/// `cfg.profile_samples`) is expanded into a batch of
/// itself plus `cfg.k` augmented copies, all carrying its label.
pub fn fit_profile_augmented(model: &Model, train: &Dataset, cfg: &DetectConfig) -> Result<SensitivityProfile> {
    let labels = train.labels()?;
    let n = cfg.profile_samples.unwrap_or(usize::MAX).min(train.len());
    let mut m = Moments::new(model);
    for i in 0..n {
        let x = augmented_batch(train.inputs.row(i), train.image, cfg.k, cfg.seed.wrapping_add(i as u64))?;
        let y = vec![labels[i]; x.rows()];
        m.push(&raw_sensitivity(model, &x, &fit_targets(model, &y, cfg.loss))?)?;
    }
    m.finish(cfg.k + 1, cfg)
}

/// `(sum |z_i|^p)^(1/p)`, computed with the largest entry factored out.
fn p_norm<'a>(z: impl Iterator<Item = &'a f64> + Clone, p: f64) -> f64 {
    let m = z.clone().fold(0.0f64, |a, &b| a.max(b.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * z.map(|v| (v.abs() / m).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Standardized sensitivities of `x` against `profile`.
pub fn standardized(model: &Model, profile: &SensitivityProfile, x: &Tensor) -> Result<Vec<Tensor>> {
    if profile.mean.len() != model.params.len() {
        return Err(Error::shape("sensnorm", "profile does not match the model"));
    }
    for (mu, p) in profile.mean.iter().zip(&model.params) {
        mu.same_shape(&p.weight, "sensnorm")?;
    }
    let s = raw_sensitivity(model, x, &test_targets(model, x, profile.loss)?)?;
    let floor = profile.sigma_floor;
    s.iter()
        .zip(profile.mean.iter().zip(&profile.std))
        .map(|(s, (mu, sd))| {
            let centered = s.sub(mu)?;
            centered.zip_map(sd, "sensnorm", |c, sd| c / sd.max(floor))
        })
        .collect()
}

/// SensNorm anomaly score of a batch; larger is more anomalous.
pub fn sensnorm_score(model: &Model, profile: &SensitivityProfile, x: &Tensor) -> Result<f64> {
    let z = standardized(model, profile, x)?;
    Ok(p_norm(z.iter().flat_map(|t| t.data().iter()), profile.p))
}

/// SensNorm for a single sample, scored as a batch of the sample and `k`
/// augmented copies.
pub fn sensnorm_single(
    model: &Model,
    profile: &SensitivityProfile,
    sample: &[f64],
    image: Option<ImageShape>,
    k: usize,
    seed: u64,
) -> Result<f64> {
    sensnorm_score(model, profile, &augmented_batch(sample, image, k, seed)?)
}

/// Maximum class probability per row.
pub fn msp_score(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows()).map(|i| probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Mean MSP of a batch; low values suggest anomalies.
pub fn msp_batch_score(model: &Model, x: &Tensor) -> Result<f64> {
    let s = msp_score(&model.predict(x)?);
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// GradNorm: for each sample, the L1 norm of the gradient of
/// `KL(uniform || softmax(f(x)))` with respect to the final dense weights,
/// averaged over the batch. The gradient is the outer product of
/// `softmax - uniform` and the final layer's input, so its L1 norm factors.
/// High values suggest in-distribution inputs.
pub fn gradnorm_score(model: &Model, x: &Tensor) -> Result<f64> {
    let h = model.features(x)?;
    let probs = softmax(&model.logits(x)?);
    let c = model.spec.classes as f64;
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let dp: f64 = probs.row(i).iter().map(|p| (p - 1.0 / c).abs()).sum();
        let hn: f64 = h.row(i).iter().map(|v| v.abs()).sum();
        total += dp * hn;
    }
    Ok(total / n as f64)
}

/// `count` batches of `batch_size` rows drawn from `data`, each a seeded
/// sample without replacement.
pub fn sample_batches(data: &Dataset, batch_size: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::arg(format!("batch size {batch_size} for a pool of {}", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..data.len()).collect();
    Ok((0..count)
        .map(|_| {
            let idx: Vec<usize> = all.choose_multiple(&mut rng, batch_size).cloned().collect();
            data.inputs.select_rows(&idx)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::ModelSpec;

    fn setup() -> (Model, Dataset) {
        (Model::new(&ModelSpec::mlp(4, &[6], 3, 2)).unwrap(), synth_blobs(60, 3, 4, 3.0, 0).unwrap())
    }

    #[test]
    fn repeated_batch_has_floored_sigma() {
        let (m, d) = setup();
        let one = d.head(10);
        let mut rep = one.clone();
        for _ in 0..9 {
            rep.inputs = Tensor::concat_rows(&[&rep.inputs, &one.inputs]).unwrap();
            rep.labels.as_mut().unwrap().extend(one.labels.as_ref().unwrap());
        }
        let prof = fit_profile(&m, &rep, 10, &DetectConfig::default()).unwrap();
        assert_eq!(prof.batches, 10);
        assert!(prof.std.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn profile_mean_matches_recomputation() {
        let (m, d) = setup();
        let prof = fit_profile(&m, &d, 20, &DetectConfig::default()).unwrap();
        let labels = d.labels().unwrap();
        let mut acc: Vec<Tensor> = m.params.iter().map(|p| Tensor::zeros(p.weight.shape())).collect();
        for b in 0..3 {
            let idx: Vec<usize> = (b * 20..(b + 1) * 20).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let s = raw_sensitivity(&m, &d.inputs.select_rows(&idx), &one_hot(&y, 3)).unwrap();
            for (a, t) in acc.iter_mut().zip(&s) {
                a.axpy(1.0, t).unwrap();
            }
        }
        for (a, mu) in acc.iter().zip(&prof.mean) {
            assert!(a.scale(1.0 / 3.0).sub(mu).unwrap().max_abs() <= 1e-15 * a.max_abs().max(1.0));
            assert_eq!(mu.shape(), a.shape());
        }
        assert!(fit_profile(&m, &d.head(20), 20, &DetectConfig::default()).is_err());
    }

    #[test]
    fn centered_batch_scores_zero() {
        let (m, d) = setup();
        let mut prof = fit_profile(&m, &d, 20, &DetectConfig::default()).unwrap();
        let x = d.head(20).inputs;
        let s = raw_sensitivity(&m, &x, &test_targets(&m, &x, prof.loss).unwrap()).unwrap();
        prof.mean = s;
        assert_eq!(sensnorm_score(&m, &prof, &x).unwrap(), 0.0);
    }

    #[test]
    fn p_norm_arithmetic() {
        assert!((p_norm([1.0, 1.0].iter(), 5.0) - 2f64.powf(0.2)).abs() < 1e-15);
        assert_eq!(p_norm([0.0, 0.0].iter(), 5.0), 0.0);
        assert!((p_norm([3.0, -4.0].iter(), 2.0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn single_sample_without_augmentation_equals_batch_score() {
        let (m, d) = setup();
        let prof = fit_profile(&m, &d, 20, &DetectConfig::default()).unwrap();
        let x = d.head(1).inputs;
        let a = sensnorm_single(&m, &prof, x.row(0), None, 0, 0).unwrap();
        assert_eq!(a, sensnorm_score(&m, &prof, &x).unwrap());
    }

    #[test]
    fn msp_examples() {
        let p = Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.1, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_eq!(msp_score(&p), vec![0.7, 1.0 / 3.0]);
    }

    #[test]
    fn gradnorm_is_zero_for_uniform_output_and_order_free() {
        let (mut m, d) = setup();
        let x = d.head(8).inputs;
        let s = gradnorm_score(&m, &x).unwrap();
        let rev: Vec<usize> = (0..8).rev().collect();
        assert!((gradnorm_score(&m, &x.select_rows(&rev)).unwrap() - s).abs() < 1e-12);
        let last = m.params.len() - 1;
        m.params[last].weight = Tensor::zeros(m.params[last].weight.shape());
        assert_eq!(gradnorm_score(&m, &x).unwrap(), 0.0);
        let conv = Model::new(&ModelSpec {
            layers: vec![crate::nn::LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: 1 }, crate::nn::LayerSpec::Flatten],
            input_shape: vec![1, 1, 1],
            classes: 3,
            seed: 0,
            bayesian: false,
        })
        .unwrap();
        assert!(gradnorm_score(&conv, &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn gradnorm_matches_autodiff() {
        let (m, d) = setup();
        let x = d.head(3).inputs;
        let mut total = 0.0;
        for i in 0..3 {
            let xi = x.select_rows(&[i]);
            let mut g = Graph::new();
            let b = m.bind_trainable(&mut g).unwrap();
            let xv = g.constant(xi);
            let logits = m.forward(&mut g, xv, &b.vars).unwrap();
            let loss = g.cross_entropy(logits, &Tensor::full(&[1, 3], 1.0 / 3.0)).unwrap();
            let grads = g.backward(loss).unwrap();
            total += grads.get(*b.weights.last().unwrap()).unwrap().data().iter().map(|v| v.abs()).sum::<f64>();
        }
        assert!((gradnorm_score(&m, &x).unwrap() - total / 3.0).abs() < 1e-12);
    }
}
