use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { lr: 2e-3 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    /// Fresh state for parameters shaped like `params`.
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Result<Self> {
        let lr = match kind {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr } => lr,
        };
        if !(lr > 0.0) {
            return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
        }
        let (first, second) = match kind {
            OptimizerKind::Adam { .. } => (
                params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
                params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            ),
            OptimizerKind::Sgd { .. } => (Vec::new(), Vec::new()),
        };
        Ok(OptimizerState { kind, first, second, step: 0 })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Where `masks` is given, masked-out
    /// entries receive no update and are re-zeroed afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], masks: Option<&[&Tensor]>) -> Result<()> {
        if params.len() != grads.len() || masks.is_some_and(|m| m.len() != params.len()) {
            return Err(Error::shape("optimizer_step", "parameter, gradient and mask counts differ"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.same_shape(g, "optimizer_step")?;
            if let Some(m) = masks {
                p.same_shape(m[i], "optimizer_step")?;
            }
            if let OptimizerKind::Adam { .. } = self.kind {
                p.same_shape(&self.first[i], "optimizer_step")?;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let mask = masks.map(|m| m[i].data());
            let pd = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    for (j, (w, &gv)) in pd.iter_mut().zip(g.data()).enumerate() {
                        if mask.is_some_and(|m| m[j] == 0.0) {
                            *w = 0.0;
                        } else {
                            *w -= lr * gv;
                        }
                    }
                }
                OptimizerKind::Adam { lr } => {
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    let m1 = self.first[i].data_mut();
                    let m2 = self.second[i].data_mut();
                    for j in 0..pd.len() {
                        if mask.is_some_and(|m| m[j] == 0.0) {
                            pd[j] = 0.0;
                            continue;
                        }
                        let gv = g.data()[j];
                        m1[j] = BETA1 * m1[j] + (1.0 - BETA1) * gv;
                        m2[j] = BETA2 * m2[j] + (1.0 - BETA2) * gv * gv;
                        let mhat = m1[j] / bc1;
                        let vhat = m2[j] / bc2;
                        pd[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1 }, &[&w]).unwrap();
        opt.step(&mut [&mut w], &[Tensor::scalar(2.0)], None).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn masked_weight_stays_exactly_zero() {
        for kind in [OptimizerKind::Sgd { lr: 0.5 }, OptimizerKind::Adam { lr: 0.5 }] {
            let mut w = Tensor::from_vec(vec![0.0, 1.0]);
            let mask = Tensor::from_vec(vec![0.0, 1.0]);
            let mut opt = OptimizerState::new(kind, &[&w]).unwrap();
            for _ in 0..5 {
                opt.step(&mut [&mut w], &[Tensor::from_vec(vec![3.0, -1.0])], Some(&[&mask])).unwrap();
            }
            assert_eq!(w.data()[0].to_bits(), 0.0f64.to_bits());
            assert!(w.data()[1] > 1.0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g², so the first step is lr * g / (|g| + eps).
        for g in [1e-3, -0.5, 7.0, 250.0] {
            let lr = 0.01;
            let mut w = Tensor::scalar(0.25);
            let mut opt = OptimizerState::new(OptimizerKind::Adam { lr }, &[&w]).unwrap();
            opt.step(&mut [&mut w], &[Tensor::scalar(g)], None).unwrap();
            let expected = lr * g.abs() / (g.abs() + ADAM_EPS);
            assert!(((w.item() - 0.25).abs() - expected).abs() < 1e-15);
            assert!(((w.item() - 0.25).abs() - lr).abs() < 1e-6 * lr / g.abs().min(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Tensor::zeros(&[2]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1 }, &[&w]).unwrap();
        assert!(opt.step(&mut [&mut w], &[Tensor::zeros(&[3])], None).is_err());
    }
}
