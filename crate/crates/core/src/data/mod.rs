//! Datasets: IDX ingestion, synthetic generators, corruptions, and the
//! anomaly families (adversarial-ready clean batches, shifts, OOD, OODom).

pub mod augment;
pub mod corrupt;
pub mod idx;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use synth::{synth_blobs, synth_digits};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn gray(side: usize) -> Self {
        ImageShape { channels: 1, height: side, width: side }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs are stored flat, `[N, features]`; `image` records the layout when
/// the features are a `C x H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    /// Declared value interval of the inputs.
    pub range: (f64, f64),
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        classes: usize,
        range: (f64, f64),
        image: Option<ImageShape>,
    ) -> Result<Self> {
        let n = inputs.rows();
        let features = inputs.row_len();
        let inputs = inputs.into_shape(&[n, features])?;
        if let Some(img) = image {
            if img.len() != features {
                return Err(Error::shape("dataset", format!("image {img:?} vs {features} features")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape("dataset", format!("{} labels for {n} inputs", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= classes) {
                return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
            }
        }
        if inputs.data().iter().any(|&x| x < range.0 || x > range.1) {
            return Err(Error::arg(format!("inputs fall outside the declared range {range:?}")));
        }
        Ok(Dataset { inputs, labels, classes, range, image })
    }

    /// Loads an IDX image file and optional IDX label file.
    pub fn from_idx_files(images: &Path, labels: Option<&Path>, classes: usize) -> Result<Self> {
        let t = idx::parse_idx(&std::fs::read(images)?)?;
        let image = match t.shape() {
            [_, h, w] => Some(ImageShape { channels: 1, height: *h, width: *w }),
            [_, c, h, w] => Some(ImageShape { channels: *c, height: *h, width: *w }),
            _ => None,
        };
        let labels = labels.map(|p| -> Result<Vec<usize>> { Ok(idx::parse_idx_labels(&std::fs::read(p)?)?) }).transpose()?;
        let lo = t.data().iter().cloned().fold(0.0, f64::min);
        let hi = t.data().iter().cloned().fold(1.0, f64::max);
        Dataset::new(t, labels, classes, (lo, hi), image)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::MissingAux("dataset carries no labels".into()))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            range: self.range,
            image: self.image,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Inputs and labels of the rows in `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Option<Vec<usize>>) {
        let d = self.subset(idx);
        (d.inputs, d.labels)
    }

    /// Index batches of `size`. With `shuffle` the order is a seeded
    /// permutation; with `drop_last` a trailing partial batch is omitted.
    pub fn batch_indices(&self, size: usize, shuffle: Option<u64>, drop_last: bool) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
            .chunks(size.max(1))
            .filter(|c| !drop_last || c.len() == size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Splits into two parts, the first holding `fraction` of the rows after
    /// a seeded shuffle.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((self.len() as f64) * fraction).round() as usize;
        (self.subset(&order[..k]), self.subset(&order[k..]))
    }
}

/// Out-of-domain copy: inputs multiplied by `scale` (255 maps `[0,1]` data
/// onto the `[0,255]` range).
pub fn make_oodom(data: &Dataset, scale: f64) -> Dataset {
    let (lo, hi) = data.range;
    let range = if scale >= 0.0 { (lo * scale, hi * scale) } else { (hi * scale, lo * scale) };
    Dataset { inputs: data.inputs.scale(scale), range, ..data.clone() }
}

/// Splits off `holdout` classes as an unlabeled OOD set and re-indexes the
/// remaining labels densely in ascending class order.
pub fn split_ood(data: &Dataset, holdout: &[usize]) -> Result<(Dataset, Dataset)> {
    let labels = data.labels()?;
    if holdout.is_empty() {
        return Err(Error::arg("holdout class set is empty"));
    }
    if let Some(&bad) = holdout.iter().find(|&&c| c >= data.classes) {
        return Err(Error::arg(format!("holdout class {bad} out of range")));
    }
    let kept: Vec<usize> = (0..data.classes).filter(|c| !holdout.contains(c)).collect();
    if kept.is_empty() {
        return Err(Error::arg("holdout covers every class"));
    }
    let mut remap = vec![usize::MAX; data.classes];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let (mut ind, mut ood) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        if remap[l] == usize::MAX {
            ood.push(i);
        } else {
            ind.push(i);
        }
    }
    let mut in_dist = data.subset(&ind);
    in_dist.labels = Some(ind.iter().map(|&i| remap[labels[i]]).collect());
    in_dist.classes = kept.len();
    let mut out = data.subset(&ood);
    out.labels = None;
    Ok((in_dist, out))
}
