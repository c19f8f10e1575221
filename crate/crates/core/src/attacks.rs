//! One-step gradient attacks (FGSM) under L-inf and L2 budgets.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{one_hot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// `epsilon` is given on the 0-255 pixel scale and divided by 255 before use,
/// so `epsilon = 8` means a radius of 8/255 on `[0, 1]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default = "unit_interval")]
    pub clamp: (f64, f64),
}

fn unit_interval() -> (f64, f64) {
    (0.0, 1.0)
}

impl AttackSpec {
    pub fn linf(epsilon: f64) -> Self {
        AttackSpec { norm: Norm::Linf, epsilon, clamp: unit_interval() }
    }

    pub fn l2(epsilon: f64) -> Self {
        AttackSpec { norm: Norm::L2, epsilon, clamp: unit_interval() }
    }

    /// Radius in input units.
    pub fn radius(&self) -> f64 {
        self.epsilon / 255.0
    }

    pub fn name(&self) -> String {
        match self.norm {
            Norm::Linf => format!("fgsm_linf_{}", self.epsilon),
            Norm::L2 => format!("fgsm_l2_{}", self.epsilon),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::arg(format!("attack epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::arg(format!("empty clamp interval {:?}", self.clamp)));
        }
        Ok(())
    }
}

/// Gradient of the batch-mean cross-entropy with respect to the inputs.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != x.rows() {
        return Err(Error::shape("input_gradient", format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let mut g = Graph::new();
    let vars = model.bind_constant(&mut g);
    let xv = g.param(x.clone());
    let logits = model.forward(&mut g, xv, &vars)?;
    let loss = g.cross_entropy(logits, &one_hot(labels, model.spec.classes))?;
    let mut grads = g.backward(loss)?;
    grads.take(xv).into_shape(x.shape())
}

/// Perturbs `x` along `grad` within the budget of `spec` and clamps.
pub fn perturb(x: &Tensor, grad: &Tensor, spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    x.same_shape(grad, "fgsm")?;
    let (lo, hi) = spec.clamp;
    if x.data().iter().any(|&v| v < lo || v > hi) {
        return Err(Error::arg(format!("attack input outside the clamp range {:?}", spec.clamp)));
    }
    let eps = spec.radius();
    let width = x.row_len();
    let mut out = x.clone();
    for (row, g) in out.data_mut().chunks_mut(width).zip(grad.data().chunks(width)) {
        match spec.norm {
            Norm::Linf => {
                for (v, &d) in row.iter_mut().zip(g) {
                    let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                    *v += eps * s;
                }
            }
            Norm::L2 => {
                let norm = g.iter().map(|d| d * d).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (v, &d) in row.iter_mut().zip(g) {
                        *v += eps * d / norm;
                    }
                }
            }
        }
        for v in row.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Fast gradient sign method: one step that increases the loss on `labels`.
pub fn fgsm(model: &Model, x: &Tensor, labels: Option<&[usize]>, spec: &AttackSpec) -> Result<Tensor> {
    let labels = labels.ok_or_else(|| Error::MissingAux("fgsm needs labels".into()))?;
    spec.validate()?;
    let grad = input_gradient(model, x, labels)?;
    perturb(x, &grad, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn wide(spec: AttackSpec) -> AttackSpec {
        AttackSpec { clamp: (-10.0, 10.0), ..spec }
    }

    #[test]
    fn sign_rule() {
        let x = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let g = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.0]).unwrap();
        let adv = perturb(&x, &g, &AttackSpec::linf(8.0)).unwrap();
        let d = adv.sub(&x).unwrap();
        assert_eq!(d.data(), &[0.5 + 8.0 / 255.0 - 0.5, 0.5 - 8.0 / 255.0 - 0.5, 0.0]);
    }

    #[test]
    fn l2_normalizes_per_sample() {
        let x = Tensor::zeros(&[2, 2]);
        let g = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, -2.0]).unwrap();
        let adv = perturb(&x, &g, &wide(AttackSpec::l2(255.0))).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-15 && (adv.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(&adv.data()[2..], &[0.0, -1.0]);
    }

    #[test]
    fn clamp_and_preconditions() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let g = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(perturb(&x, &g, &AttackSpec::linf(8.0)).unwrap().data(), &[1.0, 0.0]);
        assert!(perturb(&x, &g, &AttackSpec::linf(0.0)).is_err());
        assert!(perturb(&x.scale(2.0), &g, &AttackSpec::linf(1.0)).is_err());
        let m = Model::new(&ModelSpec::mlp(2, &[], 2, 0)).unwrap();
        assert!(matches!(fgsm(&m, &x, None, &AttackSpec::linf(8.0)), Err(Error::MissingAux(_))));
    }

    #[test]
    fn attack_raises_the_loss() {
        let m = Model::new(&ModelSpec::mlp(4, &[5], 3, 1)).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.2, 0.4, 0.6, 0.8, 0.5, 0.5, 0.1, 0.9]).unwrap();
        let y = [0, 2];
        let loss = |x: &Tensor| {
            let p = m.predict(x).unwrap();
            -(p.row(0)[0].ln() + p.row(1)[2].ln())
        };
        let adv = fgsm(&m, &x, Some(&y), &AttackSpec::linf(4.0)).unwrap();
        assert!(loss(&adv) > loss(&x));
    }
}
