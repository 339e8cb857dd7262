//! A small dense ReLU network evaluator used to measure what quantization
//! does to a model's outputs.
//!
//! Weights live in a [`TensorModel`] under the names `layer{i}.weight`
//! (shape `[out, in]`, row-major) and `layer{i}.bias` (shape `[out]`). Hidden
//! layers use ReLU; the last layer is linear and its outputs are the logits.

mod dataset;
mod taylor;
mod train;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{ModelError, Tensor, TensorModel};

pub use dataset::LabeledDataset;
pub use taylor::{
    first_order_check, taylor_residual_check, FirstOrderCheck, SlopeFit, TaylorOptions, TaylorPoint,
    TaylorReport,
};
pub use train::{train_classifier, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad network description: {0}")]
    BadSpec(String),
    #[error("model has no tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input has {actual} features, network expects {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Layer widths of a dense network, input first: `[4, 16, 3]` is a 4-16-3 MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self, EvalError> {
        if dims.len() < 2 {
            return Err(EvalError::BadSpec("need at least an input and an output width".into()));
        }
        if dims.contains(&0) {
            return Err(EvalError::BadSpec("layer widths must be positive".into()));
        }
        Ok(MlpSpec { dims })
    }

    /// Parses a `key = value` config. Only `dims` is required; `activation`
    /// is accepted if it says `relu`. `#` starts a comment.
    pub fn parse_config(text: &str) -> Result<Self, EvalError> {
        let mut dims = None;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| EvalError::BadSpec(format!("expected key = value, got `{line}`")))?;
            match key.trim() {
                "dims" => dims = Some(value.parse::<MlpSpec>()?),
                "activation" if value.trim().eq_ignore_ascii_case("relu") => {}
                "activation" => {
                    return Err(EvalError::BadSpec(format!("unsupported activation `{}`", value.trim())))
                }
                other => return Err(EvalError::BadSpec(format!("unknown key `{other}`"))),
            }
        }
        dims.ok_or_else(|| EvalError::BadSpec("missing `dims`".into()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// `(in, out)` for each layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0], w[1]))
    }

    /// Tensor names and shapes this network reads, in layer order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .enumerate()
            .flat_map(|(i, (n_in, n_out))| {
                [
                    (format!("layer{i}.weight"), vec![n_out, n_in]),
                    (format!("layer{i}.bias"), vec![n_out]),
                ]
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }
}

impl FromStr for MlpSpec {
    type Err = EvalError;

    /// Comma- or `x`-separated widths, e.g. `4,16,3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims = s
            .split([',', 'x'])
            .map(|d| {
                d.trim()
                    .parse::<usize>()
                    .map_err(|_| EvalError::BadSpec(format!("bad layer width `{}`", d.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        MlpSpec::new(dims)
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", dims.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layer {
    pub(crate) n_in: usize,
    pub(crate) n_out: usize,
    pub(crate) w: Vec<f64>,
    pub(crate) b: Vec<f64>,
}

impl Layer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|j| {
                let row = &self.w[j * self.n_in..(j + 1) * self.n_in];
                row.iter().zip(x).fold(self.b[j], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }
}

/// A network bound to concrete weights, ready to evaluate.
///
/// [`Mlp::from_model`] reproduces f32 inference: weights and activations are
/// f32 values, dot products accumulate in f64 in a fixed order. The crate's
/// numerical checks use an f64 variant with no intermediate rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub(crate) layers: Vec<Layer>,
    round_to_f32: bool,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl Mlp {
    pub fn from_model(spec: &MlpSpec, model: &TensorModel) -> Result<Self, EvalError> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (i, (n_in, n_out)) in spec.layers().enumerate() {
            let get = |name: String, shape: Vec<usize>| -> Result<Vec<f64>, EvalError> {
                let t = model.tensor(&name).ok_or_else(|| EvalError::MissingTensor(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(EvalError::ShapeMismatch {
                        name,
                        expected: shape,
                        actual: t.shape().to_vec(),
                    });
                }
                Ok(t.values().iter().map(|&v| v as f64).collect())
            };
            layers.push(Layer {
                n_in,
                n_out,
                w: get(format!("layer{i}.weight"), vec![n_out, n_in])?,
                b: get(format!("layer{i}.bias"), vec![n_out])?,
            });
        }
        Ok(Mlp {
            layers,
            round_to_f32: true,
        })
    }

    pub(crate) fn from_layers(layers: Vec<Layer>) -> Self {
        Mlp {
            layers,
            round_to_f32: false,
        }
    }

    /// Same weights, evaluated without rounding activations to f32.
    pub(crate) fn exact(mut self) -> Self {
        self.round_to_f32 = false;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    fn check_input(&self, len: usize) -> Result<(), EvalError> {
        if len != self.input_dim() {
            return Err(EvalError::InputDim {
                expected: self.input_dim(),
                actual: len,
            });
        }
        Ok(())
    }

    pub(crate) fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.affine(&a);
            if i < last {
                for v in &mut a {
                    *v = v.max(0.0);
                }
            }
            if self.round_to_f32 {
                round_f32(&mut a);
            }
        }
        a
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>, EvalError> {
        self.check_input(x.len())?;
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(self.eval(&x).into_iter().map(|v| v as f32).collect())
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> Result<usize, EvalError> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Sign pattern of every hidden pre-activation (`true` = active).
    pub(crate) fn activation_pattern(&self, x: &[f64]) -> Vec<bool> {
        let mut a = x.to_vec();
        let mut pattern = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            a = layer.affine(&a);
            pattern.extend(a.iter().map(|&v| v > 0.0));
            for v in &mut a {
                *v = v.max(0.0);
            }
        }
        pattern
    }

    /// Smallest `|pre-activation|` over all hidden units: how far `x` sits
    /// from the nearest ReLU kink.
    pub fn kink_margin(&self, x: &[f32]) -> Result<f64, EvalError> {
        self.check_input(x.len())?;
        let mut a: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut margin = f64::INFINITY;
        for layer in &self.layers[..self.layers.len() - 1] {
            a = layer.affine(&a);
            for v in &mut a {
                margin = margin.min(v.abs());
                *v = v.max(0.0);
            }
        }
        Ok(margin)
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Logits of `weights` at `x`.
pub fn forward(spec: &MlpSpec, weights: &TensorModel, x: &[f32]) -> Result<Vec<f32>, EvalError> {
    Mlp::from_model(spec, weights)?.logits(x)
}

/// Largest `|f(wa, x) - f(wb, x)|` over output components, per input.
pub fn per_input_divergence(
    spec: &MlpSpec,
    wa: &TensorModel,
    wb: &TensorModel,
    xs: &[Vec<f32>],
) -> Result<Vec<f64>, EvalError> {
    let (a, b) = (Mlp::from_model(spec, wa)?, Mlp::from_model(spec, wb)?);
    xs.iter()
        .map(|x| {
            let (la, lb) = (a.logits(x)?, b.logits(x)?);
            Ok(la
                .iter()
                .zip(&lb)
                .fold(0.0f64, |m, (&p, &q)| m.max((p as f64 - q as f64).abs())))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Divergence {
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Max and mean over the batch of the per-input divergence. An empty batch
/// gives zeros.
pub fn output_divergence(
    spec: &MlpSpec,
    wa: &TensorModel,
    wb: &TensorModel,
    xs: &[Vec<f32>],
) -> Result<Divergence, EvalError> {
    let d = per_input_divergence(spec, wa, wb, xs)?;
    if d.is_empty() {
        return Ok(Divergence::default());
    }
    Ok(Divergence {
        max_abs: d.iter().fold(0.0f64, |m, &v| m.max(v)),
        mean_abs: d.iter().sum::<f64>() / d.len() as f64,
    })
}

/// Fraction of rows whose predicted class equals the label. Ties in the
/// logits resolve to the lowest class index. An empty dataset scores 0.
pub fn top1_accuracy(
    spec: &MlpSpec,
    weights: &TensorModel,
    data: &LabeledDataset,
) -> Result<f64, EvalError> {
    let net = Mlp::from_model(spec, weights)?;
    data.check_against(spec)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, label) in data.rows() {
        if net.predict(x)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Builds a [`TensorModel`] for `spec` from per-layer `(weight, bias)` values.
pub fn model_from_layers(
    name: &str,
    spec: &MlpSpec,
    layers: Vec<(Vec<f32>, Vec<f32>)>,
) -> Result<TensorModel, EvalError> {
    if layers.len() != spec.num_layers() {
        return Err(EvalError::BadSpec(format!(
            "{} layers given, network has {}",
            layers.len(),
            spec.num_layers()
        )));
    }
    let mut tensors = Vec::with_capacity(2 * layers.len());
    for (i, ((w, b), (n_in, n_out))) in layers.into_iter().zip(spec.layers()).enumerate() {
        tensors.push(Tensor::new(format!("layer{i}.weight"), vec![n_out, n_in], w)?);
        tensors.push(Tensor::new(format!("layer{i}.bias"), vec![n_out], b)?);
    }
    Ok(TensorModel::new(name, tensors)?)
}
