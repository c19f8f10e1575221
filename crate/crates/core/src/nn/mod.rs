//! Model definitions: layer specs, parameter storage with masks, and the
//! forward pass over a [`Graph`].

mod bayes;
mod ensemble;

pub use bayes::{bayesian_loss, bayesian_predict, BayesBinding, RHO_INIT_STD};
pub use ensemble::{Ensemble, EnsembleSpec};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { fan_in: usize, fan_out: usize },
    /// Stride 1, zero padding `(kernel - 1) / 2` so odd kernels keep the spatial size.
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
    /// 2x2 max pooling, stride 2.
    Pool,
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    fn out_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Dense { fan_in, fan_out }, [n]) if n == fan_in => Some(vec![*fan_out]),
            (LayerSpec::Conv { in_channels, out_channels, kernel }, [c, h, w])
                if c == in_channels && kernel % 2 == 1 =>
            {
                Some(vec![*out_channels, *h, *w])
            }
            (LayerSpec::Pool, [c, h, w]) if *h >= 2 && *w >= 2 => Some(vec![*c, h / 2, w / 2]),
            (LayerSpec::Relu, s) => Some(s.to_vec()),
            (LayerSpec::Flatten, s) if !s.is_empty() => Some(vec![s.iter().product()]),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { fan_in, fan_out } => write!(f, "dense {fan_in}->{fan_out}"),
            LayerSpec::Conv { in_channels, out_channels, kernel } => {
                write!(f, "conv {in_channels}->{out_channels} k{kernel}")
            }
            LayerSpec::Pool => f.write_str("pool"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub bayesian: bool,
}

impl ModelSpec {
    /// 784 -> 300 -> 100 -> classes, the LeNet-300-100 shape.
    pub fn mlp3(inputs: usize, classes: usize, seed: u64) -> Self {
        ModelSpec::mlp(inputs, &[300, 100], classes, seed)
    }

    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense { fan_in, fan_out: h });
            layers.push(LayerSpec::Relu);
            fan_in = h;
        }
        layers.push(LayerSpec::Dense { fan_in, fan_out: classes });
        ModelSpec { input_shape: vec![inputs], layers, classes, seed, bayesian: false }
    }

    /// Two conv blocks and two dense layers for `[channels, side, side]` inputs.
    pub fn conv_s(channels: usize, side: usize, classes: usize, seed: u64) -> Self {
        let flat = 16 * (side / 4) * (side / 4);
        ModelSpec {
            input_shape: vec![channels, side, side],
            layers: vec![
                LayerSpec::Conv { in_channels: channels, out_channels: 8, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::Pool,
                LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::Pool,
                LayerSpec::Flatten,
                LayerSpec::Dense { fan_in: flat, fan_out: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { fan_in: 64, fan_out: classes },
            ],
            classes,
            seed,
            bayesian: false,
        }
    }

    pub fn bayesian(mut self) -> Self {
        self.bayesian = true;
        self
    }

    /// Per-sample activation shapes: entry 0 is the input, entry `k+1` the
    /// output of layer `k`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} is empty", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (k, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = layer.out_shape(cur).ok_or_else(|| {
                if k == 0 {
                    Error::Spec(format!("input {cur:?} does not feed layer 0 ({layer})"))
                } else {
                    Error::Spec(format!(
                        "layer {} ({}) does not feed layer {k} ({layer}): activation shape {cur:?}",
                        k - 1,
                        self.layers[k - 1]
                    ))
                }
            })?;
            shapes.push(next);
        }
        let last = shapes.last().unwrap();
        if last != &[self.classes] {
            return Err(Error::Spec(format!("final activation {last:?} does not match {} classes", self.classes)));
        }
        if self.classes == 0 {
            return Err(Error::Spec("zero classes".into()));
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Parameters of one weighted layer. Masks share the parameter shapes and
/// hold exact 0/1 values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Index into `ModelSpec::layers`.
    pub layer: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_mask: Tensor,
    pub bias_mask: Tensor,
    /// Softplus-parameterized standard deviations for Bayesian layers.
    pub weight_rho: Option<Tensor>,
    pub bias_rho: Option<Tensor>,
}

impl LayerParams {
    /// Output units: rows of a dense weight, output channels of a conv kernel.
    pub fn units(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn masked_weight(&self) -> Tensor {
        self.weight.mul(&self.weight_mask).expect("mask shape matches weight")
    }

    pub fn masked_bias(&self) -> Tensor {
        self.bias.mul(&self.bias_mask).expect("mask shape matches bias")
    }
}

/// Effective (already masked) parameters fed to [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Leaves created by [`Model::bind_trainable`].
#[derive(Clone, Debug)]
pub struct TrainableBinding {
    pub vars: Vec<LayerVars>,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<LayerParams>,
    /// Epochs of training applied so far; pruning schedules check it.
    pub epochs_trained: usize,
}

/// `softplus^{-1}(y) = ln(e^y - 1)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl Model {
    /// Builds a model with fan-in scaled normal weights (`std = sqrt(2/fan_in)`),
    /// zero biases and all-ones masks.
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        for (k, layer) in spec.layers.iter().enumerate() {
            let (wshape, fan_in) = match *layer {
                LayerSpec::Dense { fan_in, fan_out } => (vec![fan_out, fan_in], fan_in),
                LayerSpec::Conv { in_channels, out_channels, kernel } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                ),
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = wshape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            let weight = Tensor::new(wshape.clone(), data)?;
            let units = wshape[0];
            let rho0 = inverse_softplus(RHO_INIT_STD);
            params.push(LayerParams {
                layer: k,
                weight,
                bias: Tensor::zeros(&[units]),
                weight_mask: Tensor::ones(&wshape),
                bias_mask: Tensor::ones(&[units]),
                weight_rho: spec.bayesian.then(|| Tensor::full(&wshape, rho0)),
                bias_rho: spec.bayesian.then(|| Tensor::full(&[units], rho0)),
            });
        }
        Ok(Model { spec: spec.clone(), params, epochs_trained: 0 })
    }

    pub fn is_bayesian(&self) -> bool {
        self.params.iter().all(|p| p.weight_rho.is_some())
    }

    /// Total weight entries (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len()).sum()
    }

    /// Physically stored weights plus biases.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Unmasked weight entries.
    pub fn kept_weights(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight_mask.data().iter().filter(|&&m| m != 0.0).count())
            .sum()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_weights() as f64 / self.weight_count() as f64
    }

    /// Zeroes masked parameters in place.
    pub fn apply_masks(&mut self) {
        for p in &mut self.params {
            p.weight = p.masked_weight();
            p.bias = p.masked_bias();
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let n = x.rows();
        if x.row_len() != self.spec.input_len() || x.shape().len() < 2 {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} does not match model input {:?}", x.shape(), self.spec.input_shape),
            ));
        }
        Ok(n)
    }

    /// Adds masked parameters to `g` as constants.
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<LayerVars> {
        self.params
            .iter()
            .map(|p| LayerVars { weight: g.constant(p.masked_weight()), bias: g.constant(p.masked_bias()) })
            .collect()
    }

    /// Adds parameters as differentiable leaves; the effective weights are
    /// `w * mask`, so masked entries receive zero gradient.
    pub fn bind_trainable(&self, g: &mut Graph) -> Result<TrainableBinding> {
        let mut out = TrainableBinding { vars: Vec::new(), weights: Vec::new(), biases: Vec::new() };
        for p in &self.params {
            let w = g.param(p.weight.clone());
            let b = g.param(p.bias.clone());
            let wm = g.constant(p.weight_mask.clone());
            let bm = g.constant(p.bias_mask.clone());
            let weight = g.mul(w, wm)?;
            let bias = g.mul(b, bm)?;
            out.vars.push(LayerVars { weight, bias });
            out.weights.push(w);
            out.biases.push(b);
        }
        Ok(out)
    }

    /// Runs the layers on `x` (`[N, features]` or `[N, C, H, W]`) and
    /// returns the `[N, classes]` logits.
    pub fn forward(&self, g: &mut Graph, x: Var, vars: &[LayerVars]) -> Result<Var> {
        self.forward_prefix(g, x, vars, self.spec.layers.len())
    }

    /// Activation entering the final weighted layer, if that layer is dense.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.params.last().map(|p| p.layer);
        let Some(last) = last.filter(|&l| matches!(self.spec.layers[l], LayerSpec::Dense { .. })) else {
            return Err(Error::arg("model has no final dense layer"));
        };
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let h = self.forward_prefix(&mut g, xv, &vars, last)?;
        Ok(g.value(h).clone())
    }

    fn forward_prefix(&self, g: &mut Graph, x: Var, vars: &[LayerVars], end: usize) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("forward", format!("{} bound layers for {}", vars.len(), self.params.len())));
        }
        let n = self.check_input(g.value(x))?;
        let mut shape = vec![n];
        shape.extend_from_slice(&self.spec.input_shape);
        let mut h = g.reshape(x, &shape)?;
        let mut next = 0;
        for layer in &self.spec.layers[..end] {
            h = match layer {
                LayerSpec::Dense { .. } => {
                    let lv = vars[next];
                    next += 1;
                    let z = g.matmul_t(h, lv.weight)?;
                    g.add_row(z, lv.bias)?
                }
                LayerSpec::Conv { kernel, .. } => {
                    let lv = vars[next];
                    next += 1;
                    let z = g.conv2d(h, lv.weight, (kernel - 1) / 2)?;
                    g.add_channel(z, lv.bias)?
                }
                LayerSpec::Pool => g.max_pool2(h)?,
                LayerSpec::Relu => g.relu(h)?,
                LayerSpec::Flatten => g.flatten(h)?,
            };
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_constant(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, &vars)?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities, one row per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Forward-mode product: returns `(f(x), J_f(x) v)` for a batch `x` and
    /// tangents `v` of the same shape, using the masked deterministic weights.
    pub fn jvp(&self, x: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        x.same_shape(v, "jvp")?;
        let n = self.check_input(x)?;
        let mut shape = vec![n];
        shape.extend_from_slice(&self.spec.input_shape);
        let mut val = x.reshape(&shape)?;
        let mut tan = v.reshape(&shape)?;
        let mut next = 0;
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Dense { fan_in, fan_out } => {
                    let p = &self.params[next];
                    next += 1;
                    let w = p.masked_weight();
                    let b = p.masked_bias();
                    let mut nv = Tensor::zeros(&[n, *fan_out]);
                    let mut nt = Tensor::zeros(&[n, *fan_out]);
                    let wt = MatRef::transposed(w.data(), *fan_in);
                    gemm(n, *fan_in, *fan_out, MatRef::rowmajor(val.data(), *fan_in), wt, 0.0, nv.data_mut());
                    gemm(n, *fan_in, *fan_out, MatRef::rowmajor(tan.data(), *fan_in), wt, 0.0, nt.data_mut());
                    for row in nv.data_mut().chunks_mut(*fan_out) {
                        row.iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
                    }
                    val = nv;
                    tan = nt;
                }
                LayerSpec::Conv { kernel, .. } => {
                    let p = &self.params[next];
                    next += 1;
                    let mut g = Graph::new();
                    let w = g.constant(p.masked_weight());
                    let b = g.constant(p.masked_bias());
                    let xv = g.constant(val);
                    let tv = g.constant(tan);
                    let pad = (kernel - 1) / 2;
                    let zv = g.conv2d(xv, w, pad)?;
                    let zv = g.add_channel(zv, b)?;
                    let zt = g.conv2d(tv, w, pad)?;
                    val = g.value(zv).clone();
                    tan = g.value(zt).clone();
                }
                LayerSpec::Pool => {
                    let [n, c, h, w] = [val.shape()[0], val.shape()[1], val.shape()[2], val.shape()[3]];
                    let (oh, ow) = (h / 2, w / 2);
                    let mut nv = Tensor::zeros(&[n, c, oh, ow]);
                    let mut nt = Tensor::zeros(&[n, c, oh, ow]);
                    for p in 0..n * c {
                        let base = p * h * w;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = base + 2 * y * w + 2 * xx;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                                    if val.data()[idx] > val.data()[best] {
                                        best = idx;
                                    }
                                }
                                let o = (p * oh + y) * ow + xx;
                                nv.data_mut()[o] = val.data()[best];
                                nt.data_mut()[o] = tan.data()[best];
                            }
                        }
                    }
                    val = nv;
                    tan = nt;
                }
                LayerSpec::Relu => {
                    tan = val.zip_map(&tan, "jvp", |x, t| if x > 0.0 { t } else { 0.0 })?;
                    val = val.map(|x| x.max(0.0));
                }
                LayerSpec::Flatten => {
                    let s = [val.rows(), val.row_len()];
                    val = val.into_shape(&s)?;
                    tan = tan.into_shape(&s)?;
                }
            }
        }
        Ok((val, tan))
    }

    /// Parameter tensors in declaration order (weights, biases, then the
    /// Bayesian rho tensors when present).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &p.weight));
            out.push((format!("layer{i}.bias"), &p.bias));
            if let (Some(wr), Some(br)) = (&p.weight_rho, &p.bias_rho) {
                out.push((format!("layer{i}.weight_rho"), wr));
                out.push((format!("layer{i}.bias_rho"), br));
            }
        }
        out
    }

    pub fn named_masks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            out.push((format!("layer{i}.weight_mask"), &p.weight_mask));
            out.push((format!("layer{i}.bias_mask"), &p.bias_mask));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layer_shapes() {
        let spec = ModelSpec::mlp(4, &[], 3, 0);
        let m = Model::new(&spec).unwrap();
        assert_eq!(m.params[0].weight.shape(), &[3, 4]);
        assert_eq!(m.params[0].weight_mask, Tensor::ones(&[3, 4]));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::conv_s(1, 8, 3, 11);
        let a = Model::new(&spec).unwrap();
        let b = Model::new(&spec).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pa.weight), bits(&pb.weight));
        }
    }

    #[test]
    fn initializer_standard_deviation() {
        let spec = ModelSpec::mlp(100, &[], 1000, 5);
        let m = Model::new(&spec).unwrap();
        let w = &m.params[0].weight;
        let mean = w.mean();
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = (2.0f64 / 100.0).sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn non_composing_spec_names_the_pair() {
        let spec = ModelSpec {
            input_shape: vec![4],
            layers: vec![
                LayerSpec::Dense { fan_in: 4, fan_out: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { fan_in: 6, fan_out: 2 },
            ],
            classes: 2,
            seed: 0,
            bayesian: false,
        };
        let err = Model::new(&spec).unwrap_err().to_string();
        assert!(err.contains("layer 1 (relu)") && err.contains("layer 2 (dense 6->2)"), "{err}");
    }

    #[test]
    fn probabilities_are_normalized() {
        let m = Model::new(&ModelSpec::mlp(6, &[5], 4, 3)).unwrap();
        let x = Tensor::new(vec![3, 6], (0..18).map(|i| (i as f64).sin() * 3.0).collect()).unwrap();
        let p = m.predict(&x).unwrap();
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_rows() {
        let mut m = Model::new(&ModelSpec::mlp(6, &[5], 2, 3)).unwrap();
        let last = m.params.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        let x = Tensor::new(vec![2, 6], vec![0.3; 12]).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn wrong_batch_width_is_a_shape_error() {
        let m = Model::new(&ModelSpec::mlp(6, &[5], 2, 3)).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros(&[2, 7])), Err(Error::Shape { .. })));
    }

    #[test]
    fn jvp_matches_linearization_of_a_conv_net() {
        let m = Model::new(&ModelSpec::conv_s(1, 8, 3, 2)).unwrap();
        let x = Tensor::new(vec![1, 64], (0..64).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        let v = Tensor::new(vec![1, 64], (0..64).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect()).unwrap();
        let (val, tan) = m.jvp(&x, &v).unwrap();
        assert_eq!(val, m.logits(&x).unwrap());
        let h = 1e-6;
        let mut xp = x.clone();
        xp.axpy(h, &v).unwrap();
        let mut xm = x.clone();
        xm.axpy(-h, &v).unwrap();
        let fd = m.logits(&xp).unwrap().sub(&m.logits(&xm).unwrap()).unwrap().scale(0.5 / h);
        for (a, b) in fd.data().iter().zip(tan.data()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
