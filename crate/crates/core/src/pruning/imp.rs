//! Iterative magnitude pruning with weight rewinding.

use serde::{Deserialize, Serialize};

use super::{build_mask, compute_scores, install_mask, Criterion, Mask, Scope};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerParams, Model, ModelSpec};
use crate::optim::OptimizerState;
use crate::train::{TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpConfig {
    pub cycles: usize,
    /// Fraction of the surviving weights removed per cycle.
    pub rate: f64,
    pub rewind_epoch: usize,
}

/// Full parameter snapshot taken at `epoch`, plus the optimizer moments
/// at that point.
#[derive(Clone, Debug)]
pub struct RewindCheckpoint {
    pub epoch: usize,
    pub params: Vec<LayerParams>,
    optimizer: Option<OptimizerState>,
}

impl RewindCheckpoint {
    /// Restores the snapshot into `model` under its current masks.
    fn restore(&self, model: &mut Model, trainer: &mut Trainer) {
        for (p, snap) in model.params.iter_mut().zip(&self.params) {
            p.weight = snap.weight.clone();
            p.bias = snap.bias.clone();
            p.weight_rho = snap.weight_rho.clone();
            p.bias_rho = snap.bias_rho.clone();
        }
        model.apply_masks();
        model.epochs_trained = self.epoch;
        trainer.set_optimizer_state(self.optimizer.clone());
    }
}

/// Trains `spec` fully, then runs `cycles` rounds of global magnitude
/// pruning, rewinding to the epoch-`rewind_epoch` snapshot and retraining.
/// After cycle `i` the sparsity is `1 - (1 - rate)^i`.
///
/// `on_rewind(cycle, model)` observes the model right after each rewind.
pub fn imp(
    spec: &ModelSpec,
    data: &Dataset,
    train: &TrainConfig,
    cfg: &ImpConfig,
    mut on_rewind: impl FnMut(usize, &Model, &RewindCheckpoint),
) -> Result<(Model, Mask)> {
    if cfg.cycles == 0 {
        return Err(Error::arg("imp needs at least one cycle"));
    }
    if !(0.0..1.0).contains(&cfg.rate) {
        return Err(Error::arg(format!("per-cycle rate must lie in [0, 1), got {}", cfg.rate)));
    }
    let mut model = Model::new(spec)?;
    let mut trainer = Trainer::new(train.clone());
    let mut checkpoint = None;
    if cfg.rewind_epoch <= train.epochs {
        trainer.run(&mut model, data, cfg.rewind_epoch, |_, _| {})?;
        // The optimizer exists only once a step has been taken.
        checkpoint = Some(RewindCheckpoint {
            epoch: cfg.rewind_epoch,
            params: model.params.clone(),
            optimizer: trainer.optimizer_state().cloned(),
        });
        trainer.run(&mut model, data, train.epochs - cfg.rewind_epoch, |_, _| {})?;
    }
    let checkpoint = checkpoint.ok_or_else(|| {
        Error::Schedule(format!("rewind checkpoint missing: epoch {} beyond {} training epochs", cfg.rewind_epoch, train.epochs))
    })?;
    let mut mask = Mask::of(&model);
    for cycle in 1..=cfg.cycles {
        let target = 1.0 - (1.0 - cfg.rate).powi(cycle as i32);
        let scores = compute_scores(&model, &[], Criterion::Magnitude)?;
        mask = build_mask(&scores, target, Scope::Global)?;
        install_mask(&mut model, &mask)?;
        checkpoint.restore(&mut model, &mut trainer);
        on_rewind(cycle, &model, &checkpoint);
        trainer.run(&mut model, data, train.epochs - checkpoint.epoch, |_, _| {})?;
    }
    Ok((model, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::train::fit;

    fn setup() -> (ModelSpec, Dataset, TrainConfig) {
        (
            ModelSpec::mlp(4, &[8], 3, 5),
            synth_blobs(96, 3, 4, 3.0, 1).unwrap(),
            TrainConfig { epochs: 3, batch_size: 16, ..Default::default() },
        )
    }

    #[test]
    fn no_op_cycle_matches_plain_training() {
        let (spec, data, train) = setup();
        let (m, _) = imp(&spec, &data, &train, &ImpConfig { cycles: 1, rate: 0.0, rewind_epoch: 1 }, |_, _, _| {}).unwrap();
        let mut plain = Model::new(&spec).unwrap();
        fit(&mut plain, &data, &train).unwrap();
        assert_eq!(m, plain);
    }

    #[test]
    fn rewind_restores_snapshot_and_sparsity_compounds() {
        let (spec, data, train) = setup();
        let mut seen = 0;
        let (m, mask) = imp(&spec, &data, &train, &ImpConfig { cycles: 3, rate: 0.5, rewind_epoch: 1 }, |_, model, ck| {
            seen += 1;
            for (p, s) in model.params.iter().zip(&ck.params) {
                for ((w, k), sw) in p.weight.data().iter().zip(p.weight_mask.data()).zip(s.weight.data()) {
                    if *k == 1.0 {
                        assert_eq!(w.to_bits(), sw.to_bits());
                    }
                }
            }
        })
        .unwrap();
        assert_eq!(seen, 3);
        let total = m.weight_count();
        assert_eq!(mask.kept_weights(), super::super::kept_count(total, 0.875));
        assert!((m.sparsity() - 0.875).abs() <= 1.0 / total as f64);
    }

    #[test]
    fn missing_checkpoint() {
        let (spec, data, train) = setup();
        let r = imp(&spec, &data, &train, &ImpConfig { cycles: 1, rate: 0.5, rewind_epoch: 9 }, |_, _, _| {});
        assert!(matches!(r, Err(Error::Schedule(_))));
    }
}
