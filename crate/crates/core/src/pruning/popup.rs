//! Edge-popup: searches a subnetwork of frozen weights by training one
//! score per weight. Each step keeps the top-scoring weights; the backward
//! pass treats that selection as the identity so every score gets a
//! gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_mask, Criterion, Mask, ScoreMap, Scope};
use crate::attacks::{fgsm, AttackSpec};
use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerVars, Model};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::{one_hot, Tensor};

pub const AA_LAMBDA: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Cross-entropy plus `lambda * KL(f(X) || f(X'))` with `X'` an FGSM attack.
    Aa,
    /// Cross-entropy plus cross-entropy of OOD inputs against the uniform distribution.
    Ood,
    /// Cross-entropy on Gaussian-perturbed inputs.
    Ds,
}

/// Extra inputs an objective may need.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveAux<'a> {
    pub attack: Option<AttackSpec>,
    pub ood: Option<&'a Tensor>,
    pub sigma: Option<f64>,
    pub lambda: f64,
    pub noise_seed: u64,
}

impl Default for ObjectiveAux<'_> {
    fn default() -> Self {
        ObjectiveAux { attack: None, ood: None, sigma: None, lambda: AA_LAMBDA, noise_seed: 0 }
    }
}

fn check_aux(kind: ObjectiveKind, aux: &ObjectiveAux) -> Result<()> {
    match kind {
        ObjectiveKind::Aa if aux.attack.is_none() => Err(Error::MissingAux("aa objective needs an attack spec".into())),
        ObjectiveKind::Ood if aux.ood.is_none() => Err(Error::MissingAux("ood objective needs an OOD batch".into())),
        ObjectiveKind::Ds if aux.sigma.is_none() => Err(Error::MissingAux("ds objective needs a noise level".into())),
        _ => Ok(()),
    }
}

/// Builds the objective on `g`. `attack_model` must compute the same function
/// as `vars`; it generates the adversarial inputs.
#[allow(clippy::too_many_arguments)]
fn objective_graph(
    kind: ObjectiveKind,
    model: &Model,
    attack_model: &Model,
    g: &mut Graph,
    vars: &[LayerVars],
    x: &Tensor,
    y: &[usize],
    aux: &ObjectiveAux,
) -> Result<Var> {
    check_aux(kind, aux)?;
    let targets = one_hot(y, model.spec.classes);
    match kind {
        ObjectiveKind::Aa => {
            let xv = g.constant(x.clone());
            let clean = model.forward(g, xv, vars)?;
            let ce = g.cross_entropy(clean, &targets)?;
            if aux.lambda == 0.0 {
                return Ok(ce);
            }
            let adv = fgsm(attack_model, x, Some(y), aux.attack.as_ref().unwrap())?;
            let av = g.constant(adv);
            let attacked = model.forward(g, av, vars)?;
            let kl = g.kl_div(clean, attacked)?;
            let kl = g.scale(kl, aux.lambda)?;
            g.add(ce, kl)
        }
        ObjectiveKind::Ood => {
            let xv = g.constant(x.clone());
            let clean = model.forward(g, xv, vars)?;
            let ce = g.cross_entropy(clean, &targets)?;
            let ood = aux.ood.unwrap();
            let c = model.spec.classes;
            let uniform = Tensor::full(&[ood.rows(), c], 1.0 / c as f64);
            let ov = g.constant(ood.clone());
            let out = model.forward(g, ov, vars)?;
            let ce_u = g.cross_entropy(out, &uniform)?;
            g.add(ce, ce_u)
        }
        ObjectiveKind::Ds => {
            let sigma = aux.sigma.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(aux.noise_seed);
            let noisy = x.map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * z
            });
            let xv = g.constant(noisy);
            let out = model.forward(g, xv, vars)?;
            g.cross_entropy(out, &targets)
        }
    }
}

/// Value of the objective for the model as it stands.
pub fn objective_loss(kind: ObjectiveKind, model: &Model, x: &Tensor, y: &[usize], aux: &ObjectiveAux) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind_constant(&mut g);
    let loss = objective_graph(kind, model, model, &mut g, &vars, x, y, aux)?;
    Ok(g.value(loss).item())
}

fn default_lr() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgePopupConfig {
    pub objective: ObjectiveKind,
    pub sparsity: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size on the scores.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Selection scope of the top-k; local (per layer) by default.
    #[serde(default = "local")]
    pub scope: Scope,
    pub seed: u64,
    #[serde(default = "aa_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub sigma: Option<f64>,
}

fn local() -> Scope {
    Scope::Local
}

fn aa_lambda() -> f64 {
    AA_LAMBDA
}

impl EdgePopupConfig {
    pub fn new(objective: ObjectiveKind, sparsity: f64, epochs: usize, seed: u64) -> Self {
        EdgePopupConfig {
            objective,
            sparsity,
            epochs,
            batch_size: 128,
            lr: default_lr(),
            scope: Scope::Local,
            seed,
            lambda: AA_LAMBDA,
            attack: None,
            sigma: None,
        }
    }
}

fn selection(scores: &[Tensor], model: &Model, cfg: &EdgePopupConfig) -> Result<Mask> {
    let layers = scores
        .iter()
        .zip(&model.params)
        .map(|(s, p)| s.zip_map(&p.weight_mask, "edge_popup", |s, m| if m == 0.0 { f64::NEG_INFINITY } else { s }))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = build_mask(&ScoreMap::unstructured(Criterion::Magnitude, layers), cfg.sparsity, cfg.scope)?;
    mask.biases = model.params.iter().map(|p| p.bias_mask.clone()).collect();
    Ok(mask)
}

/// Optimizes a mask over the frozen weights of `model` for `cfg.objective`
/// and returns it; `model` is not modified. `ood` supplies the OOD inputs
/// for the `ood` objective and is cycled through in order.
pub fn edge_popup(model: &Model, cfg: &EdgePopupConfig, data: &Dataset, ood: Option<&Dataset>) -> Result<Mask> {
    let probe = ObjectiveAux {
        attack: cfg.attack,
        ood: ood.map(|d| &d.inputs),
        sigma: cfg.sigma,
        lambda: cfg.lambda,
        noise_seed: 0,
    };
    check_aux(cfg.objective, &probe)?;
    let labels = data.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scores: Vec<Tensor> = model
        .params
        .iter()
        .map(|p| {
            let fan_in = p.weight.row_len();
            let std = (2.0 / fan_in as f64).sqrt();
            p.weight.map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
        })
        .collect();
    let refs: Vec<&Tensor> = scores.iter().collect();
    let mut opt = OptimizerState::new(OptimizerKind::Adam { lr: cfg.lr }, &refs)?;
    let frozen: Vec<Tensor> = model.params.iter().map(|p| p.masked_weight()).collect();
    let biases: Vec<Tensor> = model.params.iter().map(|p| p.masked_bias()).collect();
    let ood_batches = ood.map(|d| d.batch_indices(cfg.batch_size, None, false));
    let mut ood_cursor = 0usize;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let shuffle = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(epoch as u64);
        for idx in data.batch_indices(cfg.batch_size, Some(shuffle), false) {
            let mask = selection(&scores, model, cfg)?;
            let mut attack_model = model.clone();
            for (p, m) in attack_model.params.iter_mut().zip(&mask.weights) {
                p.weight_mask = m.clone();
            }
            attack_model.apply_masks();

            let mut g = Graph::new();
            let mut leaves = Vec::new();
            let mut vars = Vec::new();
            for ((s, m), (w, b)) in scores.iter().zip(&mask.weights).zip(frozen.iter().zip(&biases)) {
                let sv = g.param(s.clone());
                let sel = g.straight_through(sv, m.clone())?;
                let wv = g.constant(w.clone());
                let weight = g.mul(wv, sel)?;
                let bias = g.constant(b.clone());
                leaves.push(sv);
                vars.push(LayerVars { weight, bias });
            }
            let ood_batch = match (&ood_batches, ood) {
                (Some(b), Some(d)) if !b.is_empty() => {
                    let t = d.inputs.select_rows(&b[ood_cursor % b.len()]);
                    ood_cursor += 1;
                    Some(t)
                }
                _ => None,
            };
            let aux = ObjectiveAux {
                attack: cfg.attack,
                ood: ood_batch.as_ref(),
                sigma: cfg.sigma,
                lambda: cfg.lambda,
                noise_seed: cfg.seed ^ step.wrapping_mul(0x9E37_79B9),
            };
            let x = data.inputs.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = objective_graph(cfg.objective, model, &attack_model, &mut g, &vars, &x, &y, &aux)?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|&l| grads.take(l)).collect();
            let mut targets: Vec<&mut Tensor> = scores.iter_mut().collect();
            opt.step(&mut targets, &grads, None)?;
            step += 1;
        }
    }
    selection(&scores, model, cfg)
}
