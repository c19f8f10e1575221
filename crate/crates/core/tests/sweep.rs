use std::collections::{BTreeMap, HashSet};

use sparsenet::harness::config::{Arch, DataConfig, ModelConfig, PruneSection, TrainSection};
use sparsenet::harness::{records, report, sweep, ExperimentConfig, Method, DENSE};
use sparsenet::pruning::{Criterion, ObjectiveKind, Schedule};

fn config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig { arch: Arch::Mlp { hidden: vec![12] }, bayesian: false },
        data: DataConfig { train_samples: 200, test_samples: 60, ..Default::default() },
        train: TrainSection { epochs: 2, batch_size: 50, seeds: vec![0, 1, 2], ..Default::default() },
        prune: PruneSection {
            methods: vec![
                Method::criterion(Criterion::Snip, Schedule::Before),
                Method::criterion(Criterion::Magnitude, Schedule::After),
                Method::criterion(Criterion::Crop, Schedule::During { epoch: 1 }),
                Method::Imp { cycles: 2, rewind_epoch: 1, name: None },
                Method::EdgePopup { objective: ObjectiveKind::Ood, epochs: Some(1), sigma: None, name: None },
            ],
            sparsities: vec![0.5, 0.8, 0.9, 0.95],
        },
        ..Default::default()
    }
}

#[test]
fn sweep_grid_relative_metrics_and_summaries() {
    let cfg = config();
    let all = sweep(&cfg).unwrap();

    let runs: HashSet<(String, u64)> =
        all.iter().filter(|r| r.method != DENSE).map(|r| (r.run_id.clone(), r.seed)).collect();
    assert_eq!(runs.len(), 5 * 4 * 3);
    let methods: HashSet<&str> = all.iter().filter(|r| r.method != DENSE).map(|r| r.method.as_str()).collect();
    assert_eq!(methods.len(), 5);

    for r in all.iter().filter(|r| r.method == DENSE && r.metric.starts_with("rel_")) {
        assert_eq!(r.value, 1.0, "{} on {}", r.metric, r.dataset);
    }
    assert!(all.iter().any(|r| r.method == DENSE && r.metric == "rel_accuracy"));

    // Means recomputed from the CSV text, summed in ascending seed order.
    let text = records::to_csv_string(&all).unwrap();
    let mut cells: BTreeMap<(String, String, String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 8, "{line}");
        cells
            .entry((f[4].into(), f[5].into(), f[2].into(), f[3].into()))
            .or_default()
            .push((f[1].parse().unwrap(), f[6].parse().unwrap()));
    }
    let dir = tempfile::tempdir().unwrap();
    let files = report::report(&all, dir.path()).unwrap();
    let mut seen = 0;
    for path in files.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")) {
        let body = std::fs::read_to_string(path).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next(), Some("metric,dataset,method,sparsity,mean,std,seeds"));
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let sparsity: f64 = f[3].parse().unwrap();
            let key = cells
                .keys()
                .find(|k| k.0 == f[0] && k.1 == f[1] && k.2 == f[2] && k.3.parse::<f64>().unwrap() == sparsity)
                .unwrap_or_else(|| panic!("no records for {line}"))
                .clone();
            let mut v = cells[&key].clone();
            v.sort_by_key(|e| e.0);
            let mean = v.iter().map(|e| e.1).sum::<f64>() / v.len() as f64;
            assert_eq!(f[4].parse::<f64>().unwrap(), mean, "{line}");
            assert_eq!(f[6].parse::<usize>().unwrap(), 3);
            seen += 1;
        }
    }
    assert_eq!(seen, cells.len());
}
