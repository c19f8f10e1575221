//! Minibatch training for deterministic and Bayesian models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{bayesian_loss, bayesian_predict, Model};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::{one_hot, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Seeds minibatch order and Bayesian weight noise.
    pub seed: u64,
    /// Weight of the KL term for Bayesian models; `None` means
    /// `1 / batches_per_epoch`.
    #[serde(default)]
    pub kl_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 128, optimizer: OptimizerKind::default(), seed: 0, kl_weight: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Owns the optimizer state for a model so that training can pause (for
/// pruning or snapshots) and resume without resetting moments.
pub struct Trainer {
    pub config: TrainConfig,
    state: Option<OptimizerState>,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Trainer { config, state: None }
    }

    /// Drops optimizer moments, e.g. after rewinding weights.
    pub fn reset_optimizer(&mut self) {
        self.state = None;
    }

    pub fn optimizer_state(&self) -> Option<&OptimizerState> {
        self.state.as_ref()
    }

    pub fn set_optimizer_state(&mut self, state: Option<OptimizerState>) {
        self.state = state;
    }

    fn ensure_state(&mut self, model: &Model) -> Result<()> {
        if self.state.is_none() {
            let mut tensors: Vec<&Tensor> = Vec::new();
            for p in &model.params {
                tensors.push(&p.weight);
            }
            for p in &model.params {
                tensors.push(&p.bias);
            }
            if model.is_bayesian() {
                for p in &model.params {
                    tensors.push(p.weight_rho.as_ref().unwrap());
                }
                for p in &model.params {
                    tensors.push(p.bias_rho.as_ref().unwrap());
                }
            }
            self.state = Some(OptimizerState::new(self.config.optimizer, &tensors)?);
        }
        Ok(())
    }

    /// Trains `epochs` further epochs. `on_epoch` sees the model after each one.
    pub fn run(
        &mut self,
        model: &mut Model,
        data: &Dataset,
        epochs: usize,
        mut on_epoch: impl FnMut(&Model, &EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let labels = data.labels()?;
        if data.features() != model.spec.input_len() {
            return Err(Error::shape(
                "train",
                format!("dataset has {} features, model expects {}", data.features(), model.spec.input_len()),
            ));
        }
        if labels.iter().any(|&l| l >= model.spec.classes) {
            return Err(Error::arg("training label exceeds model classes"));
        }
        self.ensure_state(model)?;
        let mut logs = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let epoch = model.epochs_trained;
            let batches = data.batch_indices(self.config.batch_size, Some(shuffle_seed(self.config.seed, epoch)), false);
            let kl_weight = self.config.kl_weight.unwrap_or(1.0 / batches.len() as f64);
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(self.config.seed ^ 0xB4E5, epoch));
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for idx in &batches {
                let (x, y) = data.batch(idx);
                let y = y.expect("labels checked above");
                let mut g = Graph::new();
                let (loss, logits, leaves) = if model.is_bayesian() {
                    let (loss, b) = bayesian_loss(model, &mut g, &x, &y, kl_weight, &mut rng)?;
                    let mut leaves = b.weight_means.clone();
                    leaves.extend(&b.bias_means);
                    leaves.extend(&b.weight_rhos);
                    leaves.extend(&b.bias_rhos);
                    // The logits of the sampled network are the input of the
                    // cross-entropy node; recompute cheaply for accuracy.
                    (loss, None, leaves)
                } else {
                    let b = model.bind_trainable(&mut g)?;
                    let xv = g.constant(x.clone());
                    let logits = model.forward(&mut g, xv, &b.vars)?;
                    let loss = g.cross_entropy(logits, &one_hot(&y, model.spec.classes))?;
                    let mut leaves = b.weights.clone();
                    leaves.extend(&b.biases);
                    (loss, Some(logits), leaves)
                };
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("loss diverged at epoch {epoch}")));
                }
                loss_sum += lv * idx.len() as f64;
                if let Some(l) = logits {
                    correct += g.value(l).argmax_rows().iter().zip(&y).filter(|(a, b)| a == b).count();
                }
                let mut grads = g.backward(loss)?;
                let grads: Vec<Tensor> = leaves.iter().map(|&v| grads.take(v)).collect();
                let mut masks: Vec<&Tensor> = model.params.iter().map(|p| &p.weight_mask).collect();
                masks.extend(model.params.iter().map(|p| &p.bias_mask));
                if model.is_bayesian() {
                    masks.extend(model.params.iter().map(|p| &p.weight_mask));
                    masks.extend(model.params.iter().map(|p| &p.bias_mask));
                }
                let masks: Vec<Tensor> = masks.into_iter().cloned().collect();
                let mask_refs: Vec<&Tensor> = masks.iter().collect();
                let mut targets: Vec<&mut Tensor> = Vec::new();
                let bayes = model.is_bayesian();
                let mut ws = Vec::new();
                let mut bs = Vec::new();
                let mut wr = Vec::new();
                let mut br = Vec::new();
                for p in model.params.iter_mut() {
                    ws.push(&mut p.weight);
                    bs.push(&mut p.bias);
                    if bayes {
                        wr.push(p.weight_rho.as_mut().unwrap());
                        br.push(p.bias_rho.as_mut().unwrap());
                    }
                }
                targets.extend(ws);
                targets.extend(bs);
                targets.extend(wr);
                targets.extend(br);
                self.state.as_mut().unwrap().step(&mut targets, &grads, Some(&mask_refs))?;
            }
            model.epochs_trained += 1;
            let accuracy = if model.is_bayesian() {
                let mut r = ChaCha8Rng::seed_from_u64(epoch as u64);
                accuracy_of(&bayesian_predict(model, &data.inputs, 1, &mut r)?, labels)
            } else {
                correct as f64 / data.len() as f64
            };
            let log = EpochLog { epoch: model.epochs_trained, loss: loss_sum / data.len() as f64, accuracy };
            on_epoch(model, &log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Convenience wrapper: trains a fresh optimizer for `config.epochs`.
pub fn fit(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<Vec<EpochLog>> {
    Trainer::new(config.clone()).run(model, data, config.epochs, |_, _| {})
}

pub fn accuracy_of(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = probs.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Class probabilities for a whole dataset, in chunks.
pub fn predict_all(model: &Model, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.rows();
    let idx: Vec<usize> = (0..n).collect();
    let parts = idx
        .chunks(1000)
        .map(|c| model.predict(&inputs.select_rows(c)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(accuracy_of(&predict_all(model, &data.inputs)?, data.labels()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::ModelSpec;

    #[test]
    fn linear_model_separates_far_blobs() {
        let data = synth_blobs(600, 2, 2, 10.0, 1).unwrap();
        let mut m = Model::new(&ModelSpec::mlp(2, &[], 2, 0)).unwrap();
        let cfg = TrainConfig { epochs: 20, batch_size: 32, optimizer: OptimizerKind::Adam { lr: 0.05 }, ..Default::default() };
        fit(&mut m, &data, &cfg).unwrap();
        assert!(accuracy(&m, &data).unwrap() >= 0.999);
    }

    #[test]
    fn no_signal_means_chance_accuracy() {
        let train = synth_blobs(2000, 4, 5, 0.0, 1).unwrap();
        let test = synth_blobs(4000, 4, 5, 0.0, 2).unwrap();
        let mut m = Model::new(&ModelSpec::mlp(5, &[], 4, 0)).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 64, optimizer: OptimizerKind::Adam { lr: 0.01 }, ..Default::default() };
        fit(&mut m, &train, &cfg).unwrap();
        let acc = accuracy(&m, &test).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let data = synth_blobs(50, 2, 3, 3.0, 1).unwrap();
        let mut m = Model::new(&ModelSpec::mlp(3, &[4], 2, 0)).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        fit(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn pausing_does_not_change_the_trajectory() {
        let data = synth_blobs(200, 3, 4, 3.0, 1).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..Default::default() };
        let mut a = Model::new(&ModelSpec::mlp(4, &[6], 3, 2)).unwrap();
        fit(&mut a, &data, &cfg).unwrap();
        let mut b = Model::new(&ModelSpec::mlp(4, &[6], 3, 2)).unwrap();
        let mut t = Trainer::new(cfg);
        t.run(&mut b, &data, 1, |_, _| {}).unwrap();
        t.run(&mut b, &data, 3, |_, _| {}).unwrap();
        assert_eq!(a, b);
    }
}
