//! Model evaluation and the criterion x sparsity x seed sweep.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Method, Prepared};
use super::records::RunRecord;
use crate::attacks::{fgsm, Norm};
use crate::detect::{auroc, brier, lipschitz_lower_bound, msp_score, relative_metric, MetricKind, Orientation};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::pruning::{edge_popup, imp, install_mask, prune, EdgePopupConfig, ImpConfig, ObjectiveKind, Schedule};
use crate::train::{accuracy_of, fit, predict_all};

pub const DENSE: &str = "dense";

/// Orientation of each absolute metric the sweep emits.
pub fn metric_kind(metric: &str) -> Option<MetricKind> {
    match metric {
        "accuracy" | "auroc" => Some(MetricKind::HigherBetter),
        "brier" | "lipschitz" => Some(MetricKind::LowerBetter),
        _ => None,
    }
}

/// `(metric, dataset, value)` triples for one model: clean accuracy and
/// Brier, FGSM accuracy and MSP AUC-ROC per attack, accuracy, AUC-ROC and
/// Brier per shift, MSP AUC-ROC per OOD set, and the Lipschitz lower bound.
/// Bayesian models are evaluated at their mean weights.
pub fn evaluate(model: &Model, data: &Prepared, cfg: &ExperimentConfig) -> Result<Vec<(String, String, f64)>> {
    let labels = data.test.labels()?;
    let clean = predict_all(model, &data.test.inputs)?;
    let clean_msp = msp_score(&clean);
    let mut out = vec![
        ("accuracy".to_string(), "clean".to_string(), accuracy_of(&clean, labels)),
        ("brier".to_string(), "clean".to_string(), brier(&clean, labels)?),
    ];
    let low = Orientation::LowIsAnomalous;
    for spec in &cfg.attack.specs {
        let adv = fgsm(model, &data.test.inputs, Some(labels), spec)?;
        let probs = predict_all(model, &adv)?;
        out.push(("accuracy".into(), spec.name(), accuracy_of(&probs, labels)));
        out.push(("auroc".into(), spec.name(), auroc(&clean_msp, &msp_score(&probs), low)?));
    }
    for (name, shifted) in &data.shifts {
        let probs = predict_all(model, &shifted.inputs)?;
        let l = shifted.labels()?;
        out.push(("accuracy".into(), name.clone(), accuracy_of(&probs, l)));
        out.push(("auroc".into(), name.clone(), auroc(&clean_msp, &msp_score(&probs), low)?));
        out.push(("brier".into(), name.clone(), brier(&probs, l)?));
    }
    for (name, ood) in &data.ood {
        let probs = predict_all(model, &ood.inputs)?;
        out.push(("auroc".into(), name.clone(), auroc(&clean_msp, &msp_score(&probs), low)?));
    }
    let n = cfg.report.lipschitz_samples.min(data.test.len()).max(1);
    let samples = data.test.head(n).inputs;
    out.push(("lipschitz".into(), "clean".into(), lipschitz_lower_bound(model, &samples, cfg.report.lipschitz_iterations)?));
    Ok(out)
}

/// Trains the dense baseline for `seed`.
pub fn train_dense(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<Model> {
    let mut m = Model::new(&cfg.model.spec(&data.train, seed)?)?;
    fit(&mut m, &data.train, &cfg.train.config(seed))?;
    Ok(m)
}

/// Produces the sparse model of `method` at `sparsity` for `seed`.
/// `dense` is the trained baseline of the same seed, used by methods that
/// start from a trained network.
pub fn run_method(
    cfg: &ExperimentConfig,
    data: &Prepared,
    method: &Method,
    sparsity: f64,
    seed: u64,
    dense: &Model,
) -> Result<Model> {
    let tc = cfg.train.config(seed);
    let spec = cfg.model.spec(&data.train, seed)?;
    match method {
        Method::Criterion { schedule, .. } => {
            let pc = method.prune_config(sparsity).expect("criterion method");
            let mut m = match schedule {
                Schedule::After => dense.clone(),
                _ => Model::new(&spec)?,
            };
            prune(&mut m, &pc, &data.train, &tc)?;
            Ok(m)
        }
        Method::Imp { cycles, rewind_epoch, .. } => {
            let rate = 1.0 - (1.0 - sparsity).powf(1.0 / *cycles as f64);
            let icfg = ImpConfig { cycles: *cycles, rate, rewind_epoch: *rewind_epoch };
            Ok(imp(&spec, &data.train, &tc, &icfg, |_, _, _| {})?.0)
        }
        Method::EdgePopup { objective, epochs, sigma, .. } => {
            let attack = cfg
                .attack
                .specs
                .iter()
                .find(|s| s.norm == Norm::Linf)
                .or(cfg.attack.specs.first())
                .copied();
            let pcfg = EdgePopupConfig {
                batch_size: cfg.train.batch_size,
                attack,
                sigma: *sigma,
                ..EdgePopupConfig::new(*objective, sparsity, epochs.unwrap_or(cfg.train.epochs), seed)
            };
            let ood = if *objective == ObjectiveKind::Ood { Some(&data.ood_train) } else { None };
            let mask = edge_popup(dense, &pcfg, &data.train, ood)?;
            let mut m = dense.clone();
            install_mask(&mut m, &mask)?;
            Ok(m)
        }
    }
}

fn records_for(
    run_id: &str,
    seed: u64,
    method: &str,
    sparsity: f64,
    values: Vec<(String, String, f64)>,
    wall: f64,
) -> Vec<RunRecord> {
    values
        .into_iter()
        .map(|(metric, dataset, value)| RunRecord {
            run_id: run_id.to_string(),
            seed,
            method: method.to_string(),
            sparsity,
            metric,
            dataset,
            value,
            wall_time_s: wall,
        })
        .collect()
}

/// Relative records (`rel_<metric>`) of every absolute record against the
/// dense record of the same seed, metric and dataset; `> 1` means better
/// than dense. Pairs whose dense value is zero have no relative record.
pub fn relative_records(records: &[RunRecord]) -> Result<Vec<RunRecord>> {
    let mut dense: HashMap<(u64, &str, &str), f64> = HashMap::new();
    for r in records.iter().filter(|r| r.method == DENSE) {
        dense.insert((r.seed, &r.metric, &r.dataset), r.value);
    }
    let mut out = Vec::new();
    for r in records {
        let Some(kind) = metric_kind(&r.metric) else { continue };
        let base = dense.get(&(r.seed, r.metric.as_str(), r.dataset.as_str())).ok_or_else(|| {
            Error::Schedule(format!("missing dense baseline for seed {} ({} on {})", r.seed, r.metric, r.dataset))
        })?;
        if *base == 0.0 {
            continue;
        }
        out.push(RunRecord {
            metric: format!("rel_{}", r.metric),
            value: relative_metric(r.value, *base, kind)?,
            wall_time_s: 0.0,
            ..r.clone()
        });
    }
    Ok(out)
}

fn run_id(method: &str, sparsity: f64) -> String {
    format!("{method}@{sparsity}")
}

/// Runs the full sweep: the dense baseline per seed, then every method at
/// every sparsity for every seed on a bounded worker pool, followed by the
/// seed-matched relative metrics. Record order is fixed by the
/// configuration, not by scheduling.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.report.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let timing = cfg.report.timing;
    let clock = |t: Instant| if timing { t.elapsed().as_secs_f64() } else { 0.0 };

    let absolute = pool.install(|| -> Result<Vec<RunRecord>> {
        let dense: Vec<(Model, Vec<RunRecord>)> = cfg
            .train
            .seeds
            .par_iter()
            .map(|&seed| {
                let t = Instant::now();
                let m = train_dense(cfg, &data, seed)?;
                let values = evaluate(&m, &data, cfg)?;
                let recs = records_for(DENSE, seed, DENSE, 0.0, values, clock(t));
                Ok((m, recs))
            })
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, &Method, f64)> = cfg
            .prune
            .methods
            .iter()
            .flat_map(|m| cfg.prune.sparsities.iter().flat_map(move |&s| (0..cfg.train.seeds.len()).map(move |i| (i, m, s))))
            .collect();
        let sparse: Vec<Vec<RunRecord>> = jobs
            .par_iter()
            .map(|&(i, method, s)| {
                let seed = cfg.train.seeds[i];
                let t = Instant::now();
                let m = run_method(cfg, &data, method, s, seed, &dense[i].0)?;
                let values = evaluate(&m, &data, cfg)?;
                let name = method.name();
                Ok(records_for(&run_id(&name, s), seed, &name, s, values, clock(t)))
            })
            .collect::<Result<_>>()?;
        Ok(dense.into_iter().flat_map(|(_, r)| r).chain(sparse.into_iter().flatten()).collect())
    })?;
    let relative = relative_records(&absolute)?;
    let mut all = absolute;
    all.extend(relative);
    super::records::check_unique(&all)?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, metric: &str, value: f64) -> RunRecord {
        RunRecord {
            run_id: method.into(),
            seed,
            method: method.into(),
            sparsity: if method == DENSE { 0.0 } else { 0.5 },
            metric: metric.into(),
            dataset: "clean".into(),
            value,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn relative_is_seed_matched_and_oriented() {
        let rs = vec![
            rec(DENSE, 0, "accuracy", 0.5),
            rec(DENSE, 1, "accuracy", 0.8),
            rec(DENSE, 0, "brier", 0.1),
            rec("snip", 0, "accuracy", 0.45),
            rec("snip", 1, "accuracy", 0.8),
            rec("snip", 0, "brier", 0.05),
        ];
        let rel = relative_records(&rs).unwrap();
        let get = |m: &str, s: u64, metric: &str| rel.iter().find(|r| r.method == m && r.seed == s && r.metric == metric).unwrap().value;
        assert_eq!(get(DENSE, 0, "rel_accuracy"), 1.0);
        assert_eq!(get(DENSE, 0, "rel_brier"), 1.0);
        assert!((get("snip", 0, "rel_accuracy") - 0.9).abs() < 1e-15);
        assert_eq!(get("snip", 1, "rel_accuracy"), 1.0);
        assert_eq!(get("snip", 0, "rel_brier"), 2.0);
    }

    #[test]
    fn missing_dense_is_an_error() {
        let rs = vec![rec(DENSE, 0, "accuracy", 0.5), rec("snip", 1, "accuracy", 0.4)];
        assert!(matches!(relative_records(&rs), Err(Error::Schedule(_))));
    }
}
