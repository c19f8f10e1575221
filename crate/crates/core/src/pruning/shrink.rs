//! Physical removal of pruned output units.

use crate::error::{Error, Result};
use crate::nn::{LayerParams, LayerSpec, Model, ModelSpec};
use crate::tensor::Tensor;

/// Gathers `rows` of the leading axis and `cols` of the second axis of a
/// tensor shaped `[units, inputs, rest...]`.
fn gather(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    let inner: usize = shape[2..].iter().product();
    let in_dim = shape[1];
    let mut data = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &r in rows {
        for &c in cols {
            let start = (r * in_dim + c) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = vec![rows.len(), cols.len()];
    new_shape.extend_from_slice(&shape[2..]);
    Tensor::new(new_shape, data)
}

fn pick(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::from_vec(idx.iter().map(|&i| t.data()[i]).collect())
}

/// Builds a smaller model without the output units removed by a structured
/// mask: their weight rows (or output channels) and biases are deleted, as
/// are the matching input columns (or channels) of the next weighted layer.
/// The result computes the same function as the masked model.
pub fn shrink_structured(model: &Model) -> Result<Model> {
    let last = model.params.len().saturating_sub(1);
    let mut keep_units = Vec::with_capacity(model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        let mut kept = Vec::new();
        for u in 0..p.units() {
            let row = p.weight_mask.row(u);
            let b = p.bias_mask.data()[u];
            if row.iter().any(|&v| v != b) {
                return Err(Error::arg(format!("layer {i} carries an unstructured mask")));
            }
            if b != 0.0 {
                kept.push(u);
            }
        }
        if i == last && kept.len() != p.units() {
            return Err(Error::arg("the classifier layer cannot lose units"));
        }
        keep_units.push(kept);
    }

    let shapes = model.spec.shapes()?;
    let mut spec = ModelSpec { layers: Vec::new(), ..model.spec.clone() };
    let mut params = Vec::new();
    // Kept indices along the channel (or feature) axis of the activation.
    let mut active: Vec<usize> = (0..model.spec.input_shape[0]).collect();
    let mut next = 0;
    for (k, layer) in model.spec.layers.iter().enumerate() {
        let new_layer = match *layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let p = &model.params[next];
                let rows = &keep_units[next];
                next += 1;
                let sub = |t: &Tensor| gather(t, rows, &active);
                params.push(LayerParams {
                    layer: k,
                    weight: sub(&p.weight)?,
                    bias: pick(&p.bias, rows),
                    weight_mask: sub(&p.weight_mask)?,
                    bias_mask: pick(&p.bias_mask, rows),
                    weight_rho: p.weight_rho.as_ref().map(sub).transpose()?,
                    bias_rho: p.bias_rho.as_ref().map(|t| pick(t, rows)),
                });
                active = rows.clone();
                match *layer {
                    LayerSpec::Dense { .. } => LayerSpec::Dense { fan_in: params.last().unwrap().weight.shape()[1], fan_out: rows.len() },
                    LayerSpec::Conv { kernel, .. } => {
                        LayerSpec::Conv { in_channels: params.last().unwrap().weight.shape()[1], out_channels: rows.len(), kernel }
                    }
                    _ => unreachable!(),
                }
            }
            LayerSpec::Flatten => {
                let plane: usize = shapes[k][1..].iter().product();
                active = active.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                LayerSpec::Flatten
            }
            ref other => other.clone(),
        };
        spec.layers.push(new_layer);
    }
    spec.input_shape = model.spec.input_shape.clone();
    spec.shapes()?;
    Ok(Model { spec, params, epochs_trained: model.epochs_trained })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{build_mask, compute_scores, install_mask, structure_scores, Criterion, Scope};

    fn pruned(spec: &ModelSpec, s: f64) -> Model {
        let mut m = Model::new(spec).unwrap();
        let scores = structure_scores(&compute_scores(&m, &[], Criterion::Magnitude).unwrap(), &m).unwrap();
        let mask = build_mask(&scores, s, Scope::Local).unwrap();
        install_mask(&mut m, &mask).unwrap();
        m
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let m = pruned(&ModelSpec::mlp(5, &[4, 3], 2, 0), 0.0);
        assert_eq!(shrink_structured(&m).unwrap(), m);
    }

    #[test]
    fn conv_and_dense_outputs_agree() {
        let m = pruned(&ModelSpec::conv_s(1, 8, 3, 4), 0.5);
        let small = shrink_structured(&m).unwrap();
        assert!(small.param_count() < m.param_count());
        let x = Tensor::new(vec![2, 64], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let d = m.logits(&x).unwrap().sub(&small.logits(&x).unwrap()).unwrap();
        assert!(d.max_abs() <= 1e-9);
    }

    #[test]
    fn unstructured_masks_are_rejected() {
        let mut m = Model::new(&ModelSpec::mlp(3, &[2], 2, 0)).unwrap();
        m.params[0].weight_mask.data_mut()[0] = 0.0;
        assert!(shrink_structured(&m).is_err());
    }
}
