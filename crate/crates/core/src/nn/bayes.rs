//! Mean-field Gaussian weights trained by the reparameterization trick.
//! Each entry is `w + softplus(rho) * eps` with `eps ~ N(0, 1)`; the prior
//! is a standard normal per entry.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{LayerVars, Model};
use crate::autodiff::{softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor};

/// Initial posterior standard deviation, `softplus(rho_0)`.
pub const RHO_INIT_STD: f64 = 0.05;

/// Leaves created when sampling a Bayesian model on a graph.
#[derive(Clone, Debug)]
pub struct BayesBinding {
    pub vars: Vec<LayerVars>,
    pub weight_means: Vec<Var>,
    pub bias_means: Vec<Var>,
    pub weight_rhos: Vec<Var>,
    pub bias_rhos: Vec<Var>,
    /// `KL(posterior || N(0,1))` summed over unmasked entries.
    pub kl: Var,
}

fn noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .expect("shape and length agree")
}

fn require_bayesian(model: &Model) -> Result<()> {
    if !model.is_bayesian() {
        return Err(Error::arg("model has no Bayesian layers"));
    }
    Ok(())
}

/// One reparameterized draw of `(mean, rho)` as `(mean + softplus(rho) * eps) * mask`,
/// plus the per-entry KL summed over the mask.
fn sample_tensor(
    g: &mut Graph,
    mean: &Tensor,
    rho: &Tensor,
    mask: &Tensor,
    rng: &mut impl Rng,
) -> Result<(Var, Var, Var, Var)> {
    let mu = g.param(mean.clone());
    let r = g.param(rho.clone());
    let m = g.constant(mask.clone());
    let eps = g.constant(noise(mean.shape(), rng));
    let std = g.softplus(r)?;
    let spread = g.mul(std, eps)?;
    let w = g.add(mu, spread)?;
    let eff = g.mul(w, m)?;
    // 0.5 * (mu^2 + std^2 - 1 - ln std^2)
    let mu2 = g.mul(mu, mu)?;
    let var = g.mul(std, std)?;
    let ln_var = g.ln(var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, ln_var)?;
    let c = g.add_scalar(b, -1.0)?;
    let per = g.mul(c, m)?;
    let s = g.sum(per)?;
    let kl = g.scale(s, 0.5)?;
    Ok((eff, mu, r, kl))
}

impl Model {
    /// Adds one posterior sample of every layer to `g`.
    pub fn bind_sampled(&self, g: &mut Graph, rng: &mut impl Rng) -> Result<BayesBinding> {
        require_bayesian(self)?;
        let mut vars = Vec::new();
        let (mut wm, mut bm, mut wr, mut br, mut kls) = (vec![], vec![], vec![], vec![], vec![]);
        for p in &self.params {
            let (w_rho, b_rho) = (p.weight_rho.as_ref().unwrap(), p.bias_rho.as_ref().unwrap());
            let (weight, mu, r, kl_w) = sample_tensor(g, &p.weight, w_rho, &p.weight_mask, rng)?;
            let (bias, bmu, brr, kl_b) = sample_tensor(g, &p.bias, b_rho, &p.bias_mask, rng)?;
            vars.push(LayerVars { weight, bias });
            wm.push(mu);
            bm.push(bmu);
            wr.push(r);
            br.push(brr);
            kls.push(kl_w);
            kls.push(kl_b);
        }
        let mut kl = kls[0];
        for &k in &kls[1..] {
            kl = g.add(kl, k)?;
        }
        Ok(BayesBinding { vars, weight_means: wm, bias_means: bm, weight_rhos: wr, bias_rhos: br, kl })
    }

    /// Posterior standard deviations `softplus(rho)` per weight layer.
    pub fn weight_stds(&self) -> Option<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| p.weight_rho.as_ref().map(|r| r.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())))
            .collect()
    }
}

/// Variational loss for one reparameterized draw:
/// `sum_batch NLL + kl_weight * KL(posterior || N(0,1))`.
///
/// The likelihood term is summed over the batch so that
/// `kl_weight = 1 / batches_per_epoch` gives the usual minibatch ELBO.
pub fn bayesian_loss(
    model: &Model,
    g: &mut Graph,
    x: &Tensor,
    labels: &[usize],
    kl_weight: f64,
    rng: &mut impl Rng,
) -> Result<(Var, BayesBinding)> {
    if labels.len() != x.rows() {
        return Err(Error::shape("bayesian_loss", format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let binding = model.bind_sampled(g, rng)?;
    let xv = g.constant(x.clone());
    let logits = model.forward(g, xv, &binding.vars)?;
    let ce = g.cross_entropy(logits, &one_hot(labels, model.spec.classes))?;
    let nll = g.scale(ce, labels.len() as f64)?;
    let klw = g.scale(binding.kl, kl_weight)?;
    let loss = g.add(nll, klw)?;
    Ok((loss, binding))
}

/// Mean of `n_samples` predictive distributions, each from an independent
/// weight draw.
pub fn bayesian_predict(model: &Model, x: &Tensor, n_samples: usize, rng: &mut impl Rng) -> Result<Tensor> {
    require_bayesian(model)?;
    if n_samples < 1 {
        return Err(Error::arg("bayesian_predict needs at least one sample"));
    }
    let stds = model.weight_stds().expect("checked Bayesian");
    let mut acc: Option<Tensor> = None;
    for _ in 0..n_samples {
        let mut draw = model.clone();
        for (p, wstd) in draw.params.iter_mut().zip(&stds) {
            let bstd = p.bias_rho.as_ref().unwrap().map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
            let we = noise(p.weight.shape(), rng);
            let be = noise(p.bias.shape(), rng);
            p.weight = p.weight.add(&wstd.mul(&we)?)?;
            p.bias = p.bias.add(&bstd.mul(&be)?)?;
        }
        let probs = softmax(&draw.logits(x)?);
        match acc.as_mut() {
            Some(a) => a.axpy(1.0, &probs)?,
            None => acc = Some(probs),
        }
    }
    Ok(acc.unwrap().scale(1.0 / n_samples as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ModelSpec;

    fn tiny() -> Model {
        Model::new(&ModelSpec::mlp(3, &[4], 2, 9).bayesian()).unwrap()
    }

    fn batch() -> Tensor {
        Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 1.0, 0.2, 0.0]).unwrap()
    }

    #[test]
    fn zero_variance_collapses_to_deterministic_predict() {
        let mut m = tiny();
        for p in &mut m.params {
            p.weight_rho = Some(Tensor::full(p.weight.shape(), -1e300));
            p.bias_rho = Some(Tensor::full(p.bias.shape(), -1e300));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = bayesian_predict(&m, &batch(), 3, &mut rng).unwrap();
        let b = m.predict(&batch()).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_prediction() {
        let m = tiny();
        let a = bayesian_predict(&m, &batch(), 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = bayesian_predict(&m, &batch(), 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(bayesian_predict(&m, &batch(), 0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    fn kl_only(mean: f64, std: f64) -> f64 {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, _, kl) = sample_tensor(
            &mut g,
            &Tensor::scalar(mean),
            &Tensor::scalar(crate::nn::inverse_softplus(std)),
            &Tensor::scalar(1.0),
            &mut rng,
        )
        .unwrap();
        g.value(kl).item()
    }

    #[test]
    fn closed_form_kl() {
        assert!(kl_only(0.0, 1.0).abs() < 1e-12);
        assert!((kl_only(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_contribute_no_kl() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (eff, _, _, kl) = sample_tensor(
            &mut g,
            &Tensor::from_vec(vec![3.0, 1.0]),
            &Tensor::from_vec(vec![0.2, crate::nn::inverse_softplus(1.0)]),
            &Tensor::from_vec(vec![0.0, 1.0]),
            &mut rng,
        )
        .unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-12);
        assert_eq!(g.value(eff).data()[0], 0.0);
    }

    #[test]
    fn deterministic_model_is_rejected() {
        let m = Model::new(&ModelSpec::mlp(3, &[4], 2, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(bayesian_predict(&m, &batch(), 1, &mut rng).is_err());
    }
}
