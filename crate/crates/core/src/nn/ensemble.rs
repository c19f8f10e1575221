use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub model: ModelSpec,
    /// One distinct initialization seed per member.
    pub seeds: Vec<u64>,
}

/// Independently initialized members whose softmax outputs are averaged.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn new(spec: &EnsembleSpec) -> Result<Self> {
        if spec.seeds.is_empty() {
            return Err(Error::arg("an ensemble needs at least one member"));
        }
        let mut seen = spec.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != spec.seeds.len() {
            return Err(Error::arg("ensemble member seeds must be distinct"));
        }
        let members = spec
            .seeds
            .iter()
            .map(|&seed| Model::new(&ModelSpec { seed, ..spec.model.clone() }))
            .collect::<Result<_>>()?;
        Ok(Ensemble { members })
    }

    pub fn from_members(members: Vec<Model>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::arg("an ensemble needs at least one member"));
        }
        Ok(Ensemble { members })
    }

    /// Arithmetic mean of member probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        ensemble_mean(&self.members.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?)
    }
}

/// Mean of member probability tensors. Summation runs in a fixed order of
/// the sorted member outputs so the result does not depend on member order.
pub fn ensemble_mean(outputs: &[Tensor]) -> Result<Tensor> {
    let first = outputs.first().ok_or_else(|| Error::arg("empty ensemble"))?;
    let mut out = Tensor::zeros(first.shape());
    let m = outputs.len();
    for o in outputs {
        o.same_shape(first, "ensemble_predict")?;
    }
    let mut column = Vec::with_capacity(m);
    for j in 0..first.len() {
        column.clear();
        column.extend(outputs.iter().map(|o| o.data()[j]));
        column.sort_by(f64::total_cmp);
        out.data_mut()[j] = column.iter().sum::<f64>() / m as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_opposite_members_average_to_uniform() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(ensemble_mean(&[a, b]).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_member_matches_member() {
        let spec = EnsembleSpec { model: ModelSpec::mlp(3, &[4], 2, 0), seeds: vec![7] };
        let e = Ensemble::new(&spec).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        assert_eq!(e.predict(&x).unwrap(), e.members[0].predict(&x).unwrap());
    }

    #[test]
    fn member_order_does_not_matter() {
        let spec = EnsembleSpec { model: ModelSpec::mlp(3, &[4], 3, 0), seeds: vec![1, 2, 3, 4] };
        let e = Ensemble::new(&spec).unwrap();
        let mut rev = e.clone();
        rev.members.reverse();
        rev.members.swap(0, 2);
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        assert_eq!(e.predict(&x).unwrap(), rev.predict(&x).unwrap());
    }

    #[test]
    fn empty_or_duplicate_members_are_rejected() {
        let model = ModelSpec::mlp(3, &[4], 3, 0);
        assert!(Ensemble::new(&EnsembleSpec { model: model.clone(), seeds: vec![] }).is_err());
        assert!(Ensemble::new(&EnsembleSpec { model, seeds: vec![1, 1] }).is_err());
        assert!(Ensemble::from_members(vec![]).is_err());
    }
}
