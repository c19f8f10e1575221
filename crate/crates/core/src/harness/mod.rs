//! Experiment harness: configuration, the train/prune/attack/detect/eval
//! commands, the sweep, checkpoints and CSV/SVG reporting.

pub mod checkpoint;
pub mod config;
pub mod records;
pub mod report;
pub mod sweep;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, Method, Prepared};
pub use records::RunRecord;
pub use sweep::{evaluate, relative_records, run_method, sweep, train_dense, DENSE};

use crate::attacks::fgsm;
use crate::data::Dataset;
use crate::detect::{
    auroc, fit_profile, fit_profile_augmented, gradnorm_score, msp_batch_score, sample_batches, sensnorm_score,
    sensnorm_single, Orientation,
};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;
use crate::train::{accuracy_of, predict_all, Trainer};

fn record(run_id: &str, seed: u64, method: &str, sparsity: f64, metric: &str, dataset: &str, value: f64) -> RunRecord {
    RunRecord {
        run_id: run_id.into(),
        seed,
        method: method.into(),
        sparsity,
        metric: metric.into(),
        dataset: dataset.into(),
        value,
        wall_time_s: 0.0,
    }
}

pub fn dense_checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("dense_seed{seed}.spnn"))
}

pub fn rewind_checkpoint_path(out: &Path, seed: u64, epoch: usize) -> PathBuf {
    out.join(format!("dense_seed{seed}_epoch{epoch}.spnn"))
}

/// Trains the dense model for `seed`, writes its checkpoint (and the rewind
/// snapshot if `train.rewind_epoch` is set) under `out`, and returns the
/// checkpoint path with one loss and one accuracy record per epoch.
pub fn train_command(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(PathBuf, Vec<RunRecord>)> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    std::fs::create_dir_all(out)?;
    let mut model = Model::new(&cfg.model.spec(&data.train, seed)?)?;
    let mut trainer = Trainer::new(cfg.train.config(seed));
    let mut logs = Vec::new();
    let rewind = cfg.train.rewind_epoch;
    let first = rewind.unwrap_or(cfg.train.epochs);
    logs.extend(trainer.run(&mut model, &data.train, first, |_, _| {})?);
    if let Some(k) = rewind {
        checkpoint::save(&rewind_checkpoint_path(out, seed, k), &model, &[seed])?;
        logs.extend(trainer.run(&mut model, &data.train, cfg.train.epochs - k, |_, _| {})?);
    }
    let path = dense_checkpoint_path(out, seed);
    checkpoint::save(&path, &model, &[seed])?;
    let mut recs = Vec::new();
    for l in &logs {
        let id = format!("epoch{}", l.epoch);
        recs.push(record(&id, seed, DENSE, 0.0, "train_loss", "train", l.loss));
        recs.push(record(&id, seed, DENSE, 0.0, "train_accuracy", "train", l.accuracy));
    }
    Ok((path, recs))
}

/// Loads the checkpoint at `path`, or trains the dense model for `seed` when
/// no path is given.
pub fn model_for(cfg: &ExperimentConfig, data: &Prepared, seed: u64, path: Option<&Path>) -> Result<Model> {
    match path {
        Some(p) => {
            let (m, _) = checkpoint::load(p)?;
            if m.spec.input_len() != data.test.features() || m.spec.classes != data.test.classes {
                return Err(Error::shape("checkpoint", "model does not fit the configured data"));
            }
            Ok(m)
        }
        None => train_dense(cfg, data, seed),
    }
}

/// Prunes with every configured method at every configured sparsity for
/// `seed`, writing one checkpoint each. `dense` is the trained baseline
/// (trained here when absent).
pub fn prune_command(cfg: &ExperimentConfig, seed: u64, out: &Path, dense: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    std::fs::create_dir_all(out)?;
    let dense = model_for(cfg, &data, seed, dense)?;
    let mut paths = Vec::new();
    for method in &cfg.prune.methods {
        for &s in &cfg.prune.sparsities {
            let m = run_method(cfg, &data, method, s, seed, &dense)?;
            let path = out.join(format!("{}_{s}_seed{seed}.spnn", method.name()));
            checkpoint::save(&path, &m, &[seed])?;
            paths.push(path);
        }
    }
    Ok(paths)
}

fn method_of(model: &Model) -> (String, f64) {
    let s = model.sparsity();
    if s == 0.0 {
        (DENSE.into(), 0.0)
    } else {
        ("model".into(), s)
    }
}

/// FGSM accuracy and MSP AUC-ROC of `model` for every configured attack.
pub fn attack_command(cfg: &ExperimentConfig, data: &Prepared, model: &Model, seed: u64) -> Result<Vec<RunRecord>> {
    let (method, s) = method_of(model);
    let labels = data.test.labels()?;
    let clean = crate::detect::msp_score(&predict_all(model, &data.test.inputs)?);
    let mut recs = Vec::new();
    for spec in &cfg.attack.specs {
        let adv = fgsm(model, &data.test.inputs, Some(labels), spec)?;
        let probs = predict_all(model, &adv)?;
        let a = auroc(&clean, &crate::detect::msp_score(&probs), Orientation::LowIsAnomalous)?;
        recs.push(record("attack", seed, &method, s, "accuracy", &spec.name(), accuracy_of(&probs, labels)));
        recs.push(record("attack", seed, &method, s, "auroc", &spec.name(), a));
    }
    Ok(recs)
}

/// Every metric of the sweep for one model.
pub fn eval_command(cfg: &ExperimentConfig, data: &Prepared, model: &Model, seed: u64) -> Result<Vec<RunRecord>> {
    let (method, s) = method_of(model);
    Ok(evaluate(model, data, cfg)?
        .into_iter()
        .map(|(metric, dataset, value)| record("eval", seed, &method, s, &metric, &dataset, value))
        .collect())
}

fn single_rows(d: &Dataset, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    sample_batches(d, 1, count, seed)
}

/// Batch-level detection AUC-ROC of SensNorm, MSP and GradNorm for every
/// OOD set and shift at every configured batch size. Batch size 1 scores
/// SensNorm on `k` augmented copies; MSP and GradNorm see the lone sample.
pub fn detect_command(cfg: &ExperimentConfig, data: &Prepared, model: &Model, seed: u64) -> Result<Vec<RunRecord>> {
    let (method, s) = method_of(model);
    let dc = &cfg.detect;
    let families: Vec<&(String, Dataset)> = data.ood.iter().chain(&data.shifts).collect();
    let mut recs = Vec::new();
    for &bs in &dc.batch_sizes {
        if bs == 0 {
            return Err(Error::Config("detection batch size must be positive".into()));
        }
        let single = bs == 1;
        let profile = if single { fit_profile_augmented(model, &data.train, dc)? } else { fit_profile(model, &data.train, bs, dc)? };
        let draw = |d: &Dataset, salt: u64| {
            let seed = dc.seed ^ salt;
            if single {
                single_rows(d, dc.eval_batches, seed)
            } else {
                sample_batches(d, bs, dc.eval_batches, seed)
            }
        };
        let sens = |x: &Tensor, i: usize| -> Result<f64> {
            if single {
                sensnorm_single(model, &profile, x.row(0), data.test.image, dc.k, dc.seed.wrapping_add(i as u64))
            } else {
                sensnorm_score(model, &profile, x)
            }
        };
        let scores = |batches: &[Tensor]| -> Result<[Vec<f64>; 3]> {
            let mut out = [Vec::new(), Vec::new(), Vec::new()];
            for (i, x) in batches.iter().enumerate() {
                out[0].push(sens(x, i)?);
                out[1].push(msp_batch_score(model, x)?);
                out[2].push(gradnorm_score(model, x)?);
            }
            Ok(out)
        };
        let inside = scores(&draw(&data.test, 0x1D)?)?;
        for (k, (name, d)) in families.iter().enumerate() {
            let outside = scores(&draw(d, 0x0D + k as u64 + 1)?)?;
            let dataset = format!("{name}_bs{bs}");
            let pairs = [
                ("auroc_sensnorm", Orientation::HighIsAnomalous),
                ("auroc_msp", Orientation::LowIsAnomalous),
                ("auroc_gradnorm", Orientation::LowIsAnomalous),
            ];
            for (j, (metric, o)) in pairs.into_iter().enumerate() {
                recs.push(record("detect", seed, &method, s, metric, &dataset, auroc(&inside[j], &outside[j], o)?));
            }
        }
    }
    Ok(recs)
}
