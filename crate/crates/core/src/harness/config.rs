//! Experiment configuration, read from JSON with the sections `model`,
//! `data`, `train`, `prune`, `attack`, `detect` and `report`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::{corrupt, make_oodom, split_ood, synth_digits, CorruptionKind, CorruptionSpec, Dataset};
use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::optim::OptimizerKind;
use crate::pruning::{Criterion, Granularity, ObjectiveKind, PruneConfig, Schedule, Scope};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Arch {
    /// Two hidden layers of 300 and 100 units.
    Mlp3,
    Mlp { hidden: Vec<usize> },
    /// Two 3x3 conv blocks (8 and 16 filters), then a dense head.
    ConvS,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub arch: Arch,
    #[serde(default)]
    pub bayesian: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: Arch::Mlp3, bayesian: false }
    }
}

impl ModelConfig {
    pub fn spec(&self, data: &Dataset, seed: u64) -> Result<ModelSpec> {
        let inputs = data.features();
        let spec = match &self.arch {
            Arch::Mlp3 => ModelSpec::mlp3(inputs, data.classes, seed),
            Arch::Mlp { hidden } => ModelSpec::mlp(inputs, hidden, data.classes, seed),
            Arch::ConvS => {
                let img = data.image.ok_or_else(|| Error::Config("conv_s needs image-shaped data".into()))?;
                if img.height != img.width {
                    return Err(Error::Config(format!("conv_s needs square images, got {}x{}", img.height, img.width)));
                }
                ModelSpec::conv_s(img.channels, img.height, data.classes, seed)
            }
        };
        Ok(if self.bayesian { spec.bayesian() } else { spec })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Procedural digits in the MNIST layout.
    SynthDigits { train_seed: u64, test_seed: u64 },
    /// MNIST-format IDX files.
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodSource {
    /// The test samples of the held-out classes.
    Holdout,
    /// In-distribution test inputs multiplied by `scale`.
    Oodom { scale: f64 },
    /// Images from another IDX file.
    Idx { images: PathBuf },
}

impl OodSource {
    pub fn name(&self) -> String {
        match self {
            OodSource::Holdout => "ood_holdout".into(),
            OodSource::Oodom { .. } => "oodom".into(),
            OodSource::Idx { images } => {
                format!("ood_{}", images.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
            }
        }
    }
}

fn default_source() -> DataSource {
    DataSource::SynthDigits { train_seed: 1, test_seed: 2 }
}
fn default_train_samples() -> usize {
    5000
}
fn default_test_samples() -> usize {
    2000
}
fn default_classes() -> usize {
    10
}
fn default_holdout() -> Vec<usize> {
    vec![5, 6, 7, 8, 9]
}
fn default_ood() -> Vec<OodSource> {
    vec![OodSource::Holdout, OodSource::Oodom { scale: 255.0 }]
}
fn default_shifts() -> Vec<CorruptionSpec> {
    vec![CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 }]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default = "default_source")]
    pub source: DataSource,
    /// Leading samples kept from each file, before any class split.
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Classes removed from training; empty trains on every class.
    #[serde(default = "default_holdout")]
    pub holdout_classes: Vec<usize>,
    #[serde(default = "default_ood")]
    pub ood: Vec<OodSource>,
    #[serde(default = "default_shifts")]
    pub shifts: Vec<CorruptionSpec>,
    /// Seeds the corruption noise; shared by every run so shifts are paired.
    #[serde(default)]
    pub shift_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: default_source(),
            train_samples: default_train_samples(),
            test_samples: default_test_samples(),
            classes: default_classes(),
            holdout_classes: default_holdout(),
            ood: default_ood(),
            shifts: default_shifts(),
            shift_seed: 0,
        }
    }
}

/// Everything a run evaluates on, built once per experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Vec<(String, Dataset)>,
    pub shifts: Vec<(String, Dataset)>,
    /// OOD inputs for training objectives: the held-out classes of the
    /// training file, or out-of-domain training inputs when no classes are
    /// held out.
    pub ood_train: Dataset,
}

fn require(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Data(format!("dataset file {} does not exist", path.display())));
    }
    Ok(())
}

impl DataConfig {
    pub fn load(&self) -> Result<Prepared> {
        let (train, test) = match &self.source {
            DataSource::SynthDigits { train_seed, test_seed } => {
                (synth_digits(self.train_samples, *train_seed)?, synth_digits(self.test_samples, *test_seed)?)
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    require(p)?;
                }
                (
                    Dataset::from_idx_files(train_images, Some(train_labels), self.classes)?.head(self.train_samples),
                    Dataset::from_idx_files(test_images, Some(test_labels), self.classes)?.head(self.test_samples),
                )
            }
        };
        let (train, test, holdout, ood_train) = if self.holdout_classes.is_empty() {
            let ood_train = make_oodom(&train, 255.0);
            (train, test, None, ood_train)
        } else {
            let (train, held_train) = split_ood(&train, &self.holdout_classes)?;
            let (test, held) = split_ood(&test, &self.holdout_classes)?;
            (train, test, Some(held), held_train)
        };
        let mut ood = Vec::new();
        for src in &self.ood {
            let d = match src {
                OodSource::Holdout => holdout
                    .clone()
                    .ok_or_else(|| Error::Config("holdout OOD requested without holdout classes".into()))?,
                OodSource::Oodom { scale } => make_oodom(&test, *scale),
                OodSource::Idx { images } => {
                    require(images)?;
                    let d = Dataset::from_idx_files(images, None, 1)?.head(self.test_samples);
                    if d.features() != test.features() {
                        return Err(Error::Data(format!(
                            "OOD file {} has {} features, expected {}",
                            images.display(),
                            d.features(),
                            test.features()
                        )));
                    }
                    d
                }
            };
            ood.push((src.name(), d));
        }
        let shifts = self
            .shifts
            .iter()
            .map(|&s| Ok((format!("{}_{}", s.kind.name(), s.severity), corrupt(&test, s, self.shift_seed)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { train, test, ood, shifts, ood_train })
    }
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    2e-3
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Adam step size.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Epoch at which `train` also writes a rewind snapshot.
    #[serde(default)]
    pub rewind_epoch: Option<usize>,
    #[serde(default)]
    pub kl_weight: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            seeds: default_seeds(),
            rewind_epoch: None,
            kl_weight: None,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerKind::Adam { lr: self.lr },
            seed,
            kl_weight: self.kl_weight,
        }
    }
}

fn default_score_batches() -> usize {
    10
}

/// One pruning method of the sweep; the sparsity comes from the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Criterion {
        criterion: Criterion,
        schedule: Schedule,
        #[serde(default)]
        scope: Scope,
        #[serde(default)]
        granularity: Granularity,
        #[serde(default = "default_score_batches")]
        score_batches: usize,
        #[serde(default)]
        finetune_epochs: usize,
        #[serde(default)]
        name: Option<String>,
    },
    /// Iterative magnitude pruning reaching the grid sparsity in `cycles`.
    Imp {
        cycles: usize,
        rewind_epoch: usize,
        #[serde(default)]
        name: Option<String>,
    },
    /// Mask search over the frozen dense model of the same seed.
    EdgePopup {
        objective: ObjectiveKind,
        #[serde(default)]
        epochs: Option<usize>,
        /// Noise level of the `ds` objective.
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default)]
        name: Option<String>,
    },
}

impl Method {
    pub fn criterion(criterion: Criterion, schedule: Schedule) -> Self {
        Method::Criterion {
            criterion,
            schedule,
            scope: Scope::Global,
            granularity: Granularity::Unstructured,
            score_batches: default_score_batches(),
            finetune_epochs: 0,
            name: None,
        }
    }

    pub fn prune_config(&self, sparsity: f64) -> Option<PruneConfig> {
        match self {
            Method::Criterion { criterion, schedule, scope, granularity, score_batches, finetune_epochs, .. } => {
                Some(PruneConfig {
                    scope: *scope,
                    granularity: *granularity,
                    score_batches: *score_batches,
                    finetune_epochs: *finetune_epochs,
                    ..PruneConfig::new(*criterion, *schedule, sparsity)
                })
            }
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Criterion { name: Some(n), .. } | Method::Imp { name: Some(n), .. } | Method::EdgePopup { name: Some(n), .. } => {
                n.clone()
            }
            Method::Criterion { .. } => self.prune_config(0.0).expect("criterion method").method_name(),
            Method::Imp { .. } => "imp".into(),
            Method::EdgePopup { objective, .. } => {
                let o = match objective {
                    ObjectiveKind::Aa => "aa",
                    ObjectiveKind::Ood => "ood",
                    ObjectiveKind::Ds => "ds",
                };
                format!("edge-popup-{o}")
            }
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![
        Method::criterion(Criterion::Snip, Schedule::Before),
        Method::criterion(Criterion::Grasp, Schedule::Before),
        Method::criterion(Criterion::Crop, Schedule::Before),
        Method::criterion(Criterion::Crop, Schedule::During { epoch: 1 }),
        Method::Imp { cycles: 3, rewind_epoch: 1, name: None },
    ]
}
fn default_sparsities() -> Vec<f64> {
    vec![0.5, 0.8, 0.9, 0.95]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_sparsities")]
    pub sparsities: Vec<f64>,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection { methods: default_methods(), sparsities: default_sparsities() }
    }
}

fn default_attacks() -> Vec<AttackSpec> {
    vec![AttackSpec::linf(8.0), AttackSpec::l2(8.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default = "default_attacks")]
    pub specs: Vec<AttackSpec>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { specs: default_attacks() }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_lipschitz_samples() -> usize {
    100
}
fn default_lipschitz_iterations() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
    #[serde(default = "default_lipschitz_iterations")]
    pub lipschitz_iterations: usize,
    /// Worker threads for the sweep; `None` uses one per core.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Record real wall times. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            out_dir: default_out(),
            lipschitz_samples: default_lipschitz_samples(),
            lipschitz_iterations: default_lipschitz_iterations(),
            workers: None,
            timing: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub report: ReportSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let seeds = &self.train.seeds;
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for (i, s) in seeds.iter().enumerate() {
            if seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {s} is listed twice")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.train.lr)));
        }
        if let Some(e) = self.train.rewind_epoch {
            if e > self.train.epochs {
                return Err(Error::Config(format!("rewind epoch {e} beyond {} epochs", self.train.epochs)));
            }
        }
        for &s in &self.prune.sparsities {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!("sparsity {s} outside [0, 1)")));
            }
        }
        let mut names: Vec<String> = self.prune.methods.iter().map(Method::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("method name '{}' is used twice", w[0])));
        }
        if names.iter().any(|n| n == "dense") {
            return Err(Error::Config("'dense' is reserved for the baseline".into()));
        }
        for m in &self.prune.methods {
            match m {
                Method::Criterion { schedule: Schedule::During { epoch }, .. } if *epoch >= self.train.epochs => {
                    return Err(Error::Config(format!("prune epoch {epoch} outside {} training epochs", self.train.epochs)));
                }
                Method::Imp { cycles: 0, .. } => return Err(Error::Config("imp needs at least one cycle".into())),
                Method::Imp { rewind_epoch, .. } if *rewind_epoch > self.train.epochs => {
                    return Err(Error::Config(format!("imp rewind epoch {rewind_epoch} beyond training")));
                }
                Method::EdgePopup { objective: ObjectiveKind::Ds, sigma: None, .. } => {
                    return Err(Error::Config("the ds objective needs sigma".into()));
                }
                Method::EdgePopup { objective: ObjectiveKind::Ood, .. } if self.data.ood.is_empty() => {
                    return Err(Error::Config("the ood objective needs an OOD source".into()));
                }
                _ => {}
            }
        }
        if self.report.lipschitz_iterations == 0 {
            return Err(Error::Config("lipschitz iterations must be positive".into()));
        }
        if self.report.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }
}
