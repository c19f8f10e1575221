mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use sparsenet::data::idx::{parse_idx, parse_idx_labels, write_idx, write_idx_labels, IdxType};
use sparsenet::data::{corrupt, make_oodom, split_ood, synth_digits, CorruptionKind, CorruptionSpec, Dataset};
use sparsenet::train::{accuracy, fit, TrainConfig};
use sparsenet::{Model, ModelSpec, Tensor};

fn row_hashes(d: &Dataset) -> HashSet<Vec<u64>> {
    (0..d.len()).map(|i| d.inputs.row(i).iter().map(|v| v.to_bits()).collect()).collect()
}

proptest! {
    #[test]
    fn idx_f64_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let t = common::uniform(&mut common::rng(seed), &dims, -1e6, 1e6);
        prop_assert_eq!(t.len(), n);
        let back = parse_idx(&write_idx(&t, IdxType::F64)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn idx_bytes_round_trip(dims in prop::collection::vec(1usize..6, 1..4), payload in prop::collection::vec(any::<u8>(), 0..200)) {
        let n: usize = dims.iter().product();
        let mut bytes = vec![0, 0, 0x08, dims.len() as u8];
        for d in &dims {
            bytes.extend_from_slice(&(*d as u32).to_be_bytes());
        }
        bytes.extend(payload.iter().cycle().take(n).chain(std::iter::repeat(&7u8)).take(n));
        let t = parse_idx(&bytes).unwrap();
        prop_assert_eq!(t.shape(), &dims[..]);
        prop_assert_eq!(write_idx(&t, IdxType::U8), bytes);
    }

    #[test]
    fn idx_labels_round_trip(labels in prop::collection::vec(0usize..256, 1..100)) {
        prop_assert_eq!(parse_idx_labels(&write_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn idx_never_panics_on_garbage(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = parse_idx(&bytes);
        let _ = parse_idx_labels(&bytes);
    }
}

#[test]
fn splits_share_no_rows() {
    let d = synth_digits(1500, 9).unwrap();
    let (a, b) = d.split(0.7, 3);
    assert_eq!(a.len() + b.len(), d.len());
    let (ha, hb) = (row_hashes(&a), row_hashes(&b));
    assert!(ha.is_disjoint(&hb));
    let (inside, outside) = split_ood(&d, &[5, 6, 7, 8, 9]).unwrap();
    assert!(row_hashes(&inside).is_disjoint(&row_hashes(&outside)));
    assert_eq!(inside.len() + outside.len(), d.len());
}

#[test]
fn out_of_domain_scaling_is_linear() {
    let d = synth_digits(300, 4).unwrap();
    let o = make_oodom(&d, 255.0);
    let (mi, mo) = (d.inputs.mean(), o.inputs.mean());
    assert!((mo - 255.0 * mi).abs() <= 1e-12 * mo.abs());
    assert_eq!(o.range, (0.0, 255.0));
    for (a, b) in d.inputs.data().iter().zip(o.inputs.data()) {
        assert_eq!(*b, a * 255.0);
    }
}

#[test]
fn idx_files_load_as_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_digits(20, 2).unwrap();
    let imgs = d.inputs.reshape(&[20, 28, 28]).unwrap();
    let (ip, lp) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    std::fs::write(&ip, write_idx(&imgs, IdxType::U8)).unwrap();
    std::fs::write(&lp, write_idx_labels(d.labels().unwrap())).unwrap();
    let back = Dataset::from_idx_files(&ip, Some(&lp), 10).unwrap();
    assert_eq!(back.labels().unwrap(), d.labels().unwrap());
    assert_eq!(back.image.unwrap().height, 28);
    let quantized: Vec<f64> = d.inputs.data().iter().map(|v| (v * 255.0).round() / 255.0).collect();
    assert_eq!(back.inputs, Tensor::new(vec![20, 784], quantized).unwrap());
}

/// Desk-scale check of the corruption tables: accuracy of trained models
/// does not rise with severity, and severity-5 Gaussian noise costs a
/// visible amount. The procedural digits are more noise-tolerant than
/// scanned ones; the measured cost is about 6 points.
#[test]
fn trained_accuracy_falls_with_severity() {
    let train = synth_digits(5000, 1).unwrap();
    let test = synth_digits(2000, 2).unwrap();
    let mut curves = vec![[0.0f64; 6]; CorruptionKind::ALL.len()];
    for seed in 0..3u64 {
        let mut m = Model::new(&ModelSpec::mlp3(784, 10, seed)).unwrap();
        fit(&mut m, &train, &TrainConfig { seed, ..Default::default() }).unwrap();
        let clean = accuracy(&m, &test).unwrap();
        for (k, kind) in CorruptionKind::ALL.into_iter().enumerate() {
            curves[k][0] += clean / 3.0;
            for severity in 1..=5u8 {
                let shifted = corrupt(&test, CorruptionSpec { kind, severity }, 11).unwrap();
                curves[k][severity as usize] += accuracy(&m, &shifted).unwrap() / 3.0;
            }
        }
    }
    for (k, kind) in CorruptionKind::ALL.into_iter().enumerate() {
        let c = curves[k];
        assert!(c.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{}: {c:?}", kind.name());
    }
    let g = curves[0];
    assert!(g[0] - g[5] >= 0.04, "gaussian noise severity 5 costs {:.4}", g[0] - g[5]);
}
