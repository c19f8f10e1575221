//! Pruning: saliency scores, mask construction, schedules, iterative
//! magnitude pruning, Edge-popup mask search and structured shrinking.

mod imp;
mod popup;
mod shrink;

pub use imp::{imp, ImpConfig, RewindCheckpoint};
pub use popup::{edge_popup, objective_loss, EdgePopupConfig, ObjectiveAux, ObjectiveKind, AA_LAMBDA};
pub use shrink::shrink_structured;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{hvp, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerVars, Model};
use crate::tensor::{one_hot, Tensor};
use crate::train::{EpochLog, TrainConfig, Trainer};

/// Inputs and labels of one minibatch.
pub type LabeledBatch = (Tensor, Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Magnitude,
    Snip,
    Grasp,
    Crop,
    Snr,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [Criterion::Magnitude, Criterion::Snip, Criterion::Grasp, Criterion::Crop, Criterion::Snr];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::Crop => "crop",
            Criterion::Snr => "snr",
        }
    }

    fn needs_data(self) -> bool {
        matches!(self, Criterion::Snip | Criterion::Grasp | Criterion::Crop)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown criterion '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Unstructured,
    Structured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "lowercase")]
pub enum Schedule {
    Before,
    During { epoch: usize },
    After,
}

fn default_score_batches() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub criterion: Criterion,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub granularity: Granularity,
    pub schedule: Schedule,
    pub sparsity: f64,
    /// Data batches averaged for gradient criteria; 0 means a full pass.
    #[serde(default = "default_score_batches")]
    pub score_batches: usize,
    /// Batch size for scoring; defaults to the training batch size.
    #[serde(default)]
    pub score_batch_size: Option<usize>,
    /// Fine-tuning epochs after an `after` prune.
    #[serde(default)]
    pub finetune_epochs: usize,
}

impl PruneConfig {
    pub fn new(criterion: Criterion, schedule: Schedule, sparsity: f64) -> Self {
        PruneConfig {
            criterion,
            scope: Scope::Global,
            granularity: Granularity::Unstructured,
            schedule,
            sparsity,
            score_batches: default_score_batches(),
            score_batch_size: None,
            finetune_epochs: 0,
        }
    }

    /// Short method label, e.g. `snip`, `crop-during2`, `snip-after`, `snr-s`.
    pub fn method_name(&self) -> String {
        let mut name = self.criterion.name().to_string();
        if self.granularity == Granularity::Structured {
            name.push_str("-s");
        }
        match self.schedule {
            Schedule::Before => {}
            Schedule::During { epoch } => name.push_str(&format!("-during{epoch}")),
            Schedule::After => name.push_str("-after"),
        }
        name
    }
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::arg(format!("target sparsity must lie in [0, 1), got {s}")));
    }
    Ok(())
}

/// Number of items kept at sparsity `s` out of `total`: `ceil((1 - s) * total)`.
/// The small slack absorbs binary rounding of values such as `0.9 * 100`.
pub fn kept_count(total: usize, s: f64) -> usize {
    (((1.0 - s) * total as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-layer weight scores; higher means more important.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub criterion: Criterion,
    pub granularity: Granularity,
    /// One tensor per weighted layer, shaped like the weight. Structured maps
    /// hold a constant per output unit.
    pub layers: Vec<Tensor>,
    /// Layers eligible for removal; structured maps exclude the classifier.
    pub prunable: Vec<bool>,
}

impl ScoreMap {
    pub fn unstructured(criterion: Criterion, layers: Vec<Tensor>) -> Self {
        let prunable = vec![true; layers.len()];
        ScoreMap { criterion, granularity: Granularity::Unstructured, layers, prunable }
    }

    /// Multiplies every score by `c`.
    pub fn scaled(&self, c: f64) -> ScoreMap {
        ScoreMap { layers: self.layers.iter().map(|t| t.scale(c)).collect(), ..self.clone() }
    }
}

/// Binary keep-masks for the weights and biases of every weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub granularity: Granularity,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mask {
    /// The masks currently installed in `model`.
    pub fn of(model: &Model) -> Mask {
        Mask {
            granularity: Granularity::Unstructured,
            weights: model.params.iter().map(|p| p.weight_mask.clone()).collect(),
            biases: model.params.iter().map(|p| p.bias_mask.clone()).collect(),
        }
    }

    pub fn total_weights(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn kept_weights(&self) -> usize {
        self.weights.iter().map(|m| m.data().iter().filter(|&&v| v != 0.0).count()).sum()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_weights() as f64 / self.total_weights() as f64
    }

    /// Output units of `layer` whose weights are kept.
    pub fn kept_units(&self, layer: usize) -> usize {
        let m = &self.weights[layer];
        (0..m.rows()).filter(|&u| m.row(u).iter().any(|&v| v != 0.0)).count()
    }

    /// True when every output unit is either fully kept (with its bias) or
    /// fully removed.
    pub fn is_structured(&self) -> bool {
        self.weights.iter().zip(&self.biases).all(|(w, b)| {
            (0..w.rows()).all(|u| {
                let row = w.row(u);
                row.iter().all(|&v| v == b.data()[u])
            })
        })
    }
}

/// Replaces the masks of `model` by `mask` and zeroes the masked parameters.
pub fn install_mask(model: &mut Model, mask: &Mask) -> Result<()> {
    if mask.weights.len() != model.params.len() || mask.biases.len() != model.params.len() {
        return Err(Error::shape("install_mask", format!("{} mask layers for {}", mask.weights.len(), model.params.len())));
    }
    for (p, (w, b)) in model.params.iter_mut().zip(mask.weights.iter().zip(&mask.biases)) {
        p.weight.same_shape(w, "install_mask")?;
        p.bias.same_shape(b, "install_mask")?;
        if w.data().iter().chain(b.data()).any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg("mask entries must be 0 or 1"));
        }
        p.weight_mask = w.clone();
        p.bias_mask = b.clone();
    }
    model.apply_masks();
    Ok(())
}

/// Binds weights as differentiable leaves (from `weights`, masked by the
/// model's masks) and biases as constants, then runs the forward pass.
fn weight_loss_graph(model: &Model, weights: &[Tensor], x: &Tensor, y: &[usize]) -> Result<(Graph, Vec<crate::autodiff::Var>, crate::autodiff::Var)> {
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let mut vars = Vec::new();
    for (p, w) in model.params.iter().zip(weights) {
        let wl = g.param(w.clone());
        let m = g.constant(p.weight_mask.clone());
        let weight = g.mul(wl, m)?;
        let bias = g.constant(p.masked_bias());
        leaves.push(wl);
        vars.push(LayerVars { weight, bias });
    }
    let xv = g.constant(x.clone());
    let logits = model.forward(&mut g, xv, &vars)?;
    let loss = g.cross_entropy(logits, &one_hot(y, model.spec.classes))?;
    Ok((g, leaves, loss))
}

/// Weight gradients of the mean cross-entropy, averaged over `batches`.
fn mean_weight_gradient(model: &Model, weights: &[Tensor], batches: &[LabeledBatch]) -> Result<Vec<Tensor>> {
    let mut acc: Vec<Tensor> = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
    for (x, y) in batches {
        let (g, leaves, loss) = weight_loss_graph(model, weights, x, y)?;
        let mut grads = g.backward(loss)?;
        for (a, l) in acc.iter_mut().zip(leaves) {
            a.axpy(1.0 / batches.len() as f64, &grads.take(l))?;
        }
    }
    Ok(acc)
}

/// Scores every weight of `model` under `criterion`. Gradients and
/// Hessian-gradient products are averaged over `batches` before the formula
/// is applied; weights that are already masked score negative infinity.
pub fn compute_scores(model: &Model, batches: &[LabeledBatch], criterion: Criterion) -> Result<ScoreMap> {
    if criterion.needs_data() && batches.is_empty() {
        return Err(Error::MissingAux(format!("{criterion} needs at least one data batch")));
    }
    let weights: Vec<Tensor> = model.params.iter().map(|p| p.weight.clone()).collect();
    let raw: Vec<Tensor> = match criterion {
        Criterion::Magnitude => weights.iter().map(|w| w.map(f64::abs)).collect(),
        Criterion::Snr => {
            let stds = model
                .weight_stds()
                .ok_or_else(|| Error::arg("snr scores need a Bayesian model"))?;
            weights.iter().zip(&stds).map(|(w, t)| w.zip_map(t, "snr", |w, t| (w / t).abs())).collect::<Result<_>>()?
        }
        Criterion::Snip => {
            let g = mean_weight_gradient(model, &weights, batches)?;
            weights.iter().zip(&g).map(|(w, g)| w.zip_map(g, "snip", |w, g| (w * g).abs())).collect::<Result<_>>()?
        }
        Criterion::Grasp | Criterion::Crop => {
            let g = mean_weight_gradient(model, &weights, batches)?;
            let hg = hvp(|w: &[Tensor]| mean_weight_gradient(model, w, batches), &weights, &g)?;
            let sign = if criterion == Criterion::Grasp { -1.0 } else { 1.0 };
            weights
                .iter()
                .zip(&hg)
                .map(|(w, h)| w.zip_map(h, "hessian_score", |w, h| sign * (w * h).abs()))
                .collect::<Result<_>>()?
        }
    };
    let layers = raw
        .into_iter()
        .zip(&model.params)
        .map(|(s, p)| s.zip_map(&p.weight_mask, "scores", |s, m| if m == 0.0 { f64::NEG_INFINITY } else { s }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreMap::unstructured(criterion, layers))
}

/// Sums scores over each output unit (dense row, conv output channel) and
/// spreads the sum back over the unit. Fully masked units stay at negative
/// infinity; masked members of a live unit contribute nothing. The final
/// layer is marked non-prunable because its units are the classes.
pub fn structure_scores(scores: &ScoreMap, model: &Model) -> Result<ScoreMap> {
    if scores.layers.len() != model.params.len() {
        return Err(Error::shape("structure_scores", "score map does not match the model"));
    }
    let mut layers = Vec::with_capacity(scores.layers.len());
    for (s, p) in scores.layers.iter().zip(&model.params) {
        if !model.spec.layers[p.layer].is_weighted() {
            return Err(Error::arg(format!("layer {} has no output units", p.layer)));
        }
        s.same_shape(&p.weight, "structure_scores")?;
        let mut out = s.clone();
        let width = s.row_len();
        for row in out.data_mut().chunks_mut(width) {
            let live: Vec<f64> = row.iter().cloned().filter(|v| v.is_finite()).collect();
            let unit = if live.is_empty() { f64::NEG_INFINITY } else { live.iter().sum() };
            row.iter_mut().for_each(|v| *v = unit);
        }
        layers.push(out);
    }
    let mut prunable = vec![true; layers.len()];
    if let Some(last) = prunable.last_mut() {
        *last = false;
    }
    Ok(ScoreMap { criterion: scores.criterion, granularity: Granularity::Structured, layers, prunable })
}

/// Keeps the `ceil((1 - s) * n)` highest scores, jointly over all prunable
/// layers (global) or per layer (local). `n` counts weights for
/// unstructured maps and output units for structured ones. Ties go to the
/// lower (layer, flat index).
pub fn build_mask(scores: &ScoreMap, sparsity: f64, scope: Scope) -> Result<Mask> {
    check_sparsity(sparsity)?;
    let structured = scores.granularity == Granularity::Structured;
    // (score, layer, index) candidates per selection group.
    let item = |l: usize, t: &Tensor| -> Vec<(f64, usize, usize)> {
        if structured {
            (0..t.rows()).map(|u| (t.row(u)[0], l, u)).collect()
        } else {
            t.data().iter().enumerate().map(|(i, &s)| (s, l, i)).collect()
        }
    };
    if scores.layers.iter().any(|t| t.data().iter().any(|v| v.is_nan())) {
        return Err(Error::NonFinite("NaN pruning score".into()));
    }
    let groups: Vec<Vec<(f64, usize, usize)>> = match scope {
        Scope::Global => vec![scores
            .layers
            .iter()
            .enumerate()
            .filter(|(l, _)| scores.prunable[*l])
            .flat_map(|(l, t)| item(l, t))
            .collect()],
        Scope::Local => scores
            .layers
            .iter()
            .enumerate()
            .filter(|(l, _)| scores.prunable[*l])
            .map(|(l, t)| item(l, t))
            .collect(),
    };
    let mut keep: Vec<Vec<bool>> = scores
        .layers
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let n = if structured { t.rows() } else { t.len() };
            vec![!scores.prunable[l]; n]
        })
        .collect();
    for mut group in groups {
        let k = kept_count(group.len(), sparsity);
        group.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, l, i) in &group[..k] {
            keep[l][i] = true;
        }
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (t, k) in scores.layers.iter().zip(&keep) {
        let units = t.rows();
        let width = t.row_len();
        let (w, b): (Vec<f64>, Vec<f64>) = if structured {
            let w = (0..units).flat_map(|u| std::iter::repeat(k[u] as u8 as f64).take(width)).collect();
            (w, k.iter().map(|&v| v as u8 as f64).collect())
        } else {
            (k.iter().map(|&v| v as u8 as f64).collect(), vec![1.0; units])
        };
        weights.push(Tensor::new(t.shape().to_vec(), w)?);
        biases.push(Tensor::new(vec![units], b)?);
    }
    Ok(Mask { granularity: scores.granularity, weights, biases })
}

/// Score batches drawn from `data`: the first `count` shuffled batches, or
/// every batch when `count` is 0.
pub fn score_batches(data: &Dataset, batch_size: usize, count: usize, seed: u64) -> Result<Vec<LabeledBatch>> {
    data.labels()?;
    let idx = data.batch_indices(batch_size, Some(seed), false);
    let take = if count == 0 { idx.len() } else { count.min(idx.len()) };
    Ok(idx[..take]
        .iter()
        .map(|i| {
            let (x, y) = data.batch(i);
            (x, y.expect("labels checked"))
        })
        .collect())
}

/// Scores `model` as configured and returns the resulting mask, combined
/// with any mask already installed.
pub fn select_mask(model: &Model, cfg: &PruneConfig, data: &Dataset, seed: u64, batch_size: usize) -> Result<Mask> {
    check_sparsity(cfg.sparsity)?;
    let batches = if cfg.criterion.needs_data() {
        score_batches(data, cfg.score_batch_size.unwrap_or(batch_size), cfg.score_batches, seed)?
    } else {
        Vec::new()
    };
    let mut scores = compute_scores(model, &batches, cfg.criterion)?;
    if cfg.granularity == Granularity::Structured {
        scores = structure_scores(&scores, model)?;
    }
    let mut mask = build_mask(&scores, cfg.sparsity, cfg.scope)?;
    if cfg.granularity == Granularity::Unstructured {
        mask.biases = model.params.iter().map(|p| p.bias_mask.clone()).collect();
    }
    Ok(mask)
}

/// Result of [`prune`]: the installed mask and the logs of any training
/// that ran inside the schedule.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub mask: Mask,
    pub logs: Vec<EpochLog>,
}

/// Runs a pruning schedule on `model`.
///
/// * `before`: the model must be untrained; it is pruned, then trained for
///   `train.epochs`.
/// * `during { epoch }`: training runs (or resumes) up to `epoch`, the model
///   is pruned, and training continues to `train.epochs` with the same
///   optimizer state.
/// * `after`: the model must be trained; it is pruned and fine-tuned for
///   `finetune_epochs`.
pub fn prune(model: &mut Model, cfg: &PruneConfig, data: &Dataset, train: &TrainConfig) -> Result<PruneOutcome> {
    check_sparsity(cfg.sparsity)?;
    if cfg.criterion == Criterion::Snr && !model.is_bayesian() {
        return Err(Error::arg("snr scores need a Bayesian model"));
    }
    let mut trainer = Trainer::new(train.clone());
    let mut logs = Vec::new();
    let mask = match cfg.schedule {
        Schedule::Before => {
            if model.epochs_trained != 0 {
                return Err(Error::Schedule(format!("'before' needs an untrained model, got {} epochs", model.epochs_trained)));
            }
            let mask = select_mask(model, cfg, data, train.seed, train.batch_size)?;
            install_mask(model, &mask)?;
            logs.extend(trainer.run(model, data, train.epochs, |_, _| {})?);
            mask
        }
        Schedule::During { epoch } => {
            if epoch >= train.epochs {
                return Err(Error::Schedule(format!("prune epoch {epoch} outside {} training epochs", train.epochs)));
            }
            if model.epochs_trained > epoch {
                return Err(Error::Schedule(format!(
                    "model already trained {} epochs, past prune epoch {epoch}",
                    model.epochs_trained
                )));
            }
            let warmup = epoch - model.epochs_trained;
            logs.extend(trainer.run(model, data, warmup, |_, _| {})?);
            let mask = select_mask(model, cfg, data, train.seed, train.batch_size)?;
            install_mask(model, &mask)?;
            logs.extend(trainer.run(model, data, train.epochs - epoch, |_, _| {})?);
            mask
        }
        Schedule::After => {
            if model.epochs_trained == 0 {
                return Err(Error::Schedule("'after' needs a trained model".into()));
            }
            let mask = select_mask(model, cfg, data, train.seed, train.batch_size)?;
            install_mask(model, &mask)?;
            logs.extend(trainer.run(model, data, cfg.finetune_epochs, |_, _| {})?);
            mask
        }
    };
    Ok(PruneOutcome { mask, logs })
}
