//! Minibatch SGD with momentum on softmax cross-entropy. Only meant to turn a
//! synthetic dataset into a classifier with non-trivial accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{model_from_layers, EvalError, Layer, LabeledDataset, MlpSpec};
use crate::model::TensorModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn zeros_like(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .map(|l| Layer {
            n_in: l.n_in,
            n_out: l.n_out,
            w: vec![0.0; l.w.len()],
            b: vec![0.0; l.b.len()],
        })
        .collect()
}

/// Adds the cross-entropy gradient for one example into `grad`.
fn backprop(layers: &[Layer], x: &[f64], label: usize, grad: &mut [Layer]) {
    let last = layers.len() - 1;
    let mut acts = vec![x.to_vec()];
    for (i, l) in layers.iter().enumerate() {
        let mut z = l.affine(acts.last().unwrap());
        if i < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    let logits = &acts[layers.len()];
    let top = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let mut delta: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    delta[label] -= 1.0;

    for i in (0..layers.len()).rev() {
        let (l, g, input) = (&layers[i], &mut grad[i], &acts[i]);
        for j in 0..l.n_out {
            g.b[j] += delta[j];
            for k in 0..l.n_in {
                g.w[j * l.n_in + k] += delta[j] * input[k];
            }
        }
        if i > 0 {
            let mut prev = vec![0.0; l.n_in];
            for j in 0..l.n_out {
                for k in 0..l.n_in {
                    prev[k] += l.w[j * l.n_in + k] * delta[j];
                }
            }
            // ReLU derivative: the stored activation is zero exactly where the
            // unit was inactive.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// Trains a classifier for `spec` on `data`. He-normal initialisation,
/// zero biases; deterministic for a given `cfg.seed`.
pub fn train_classifier(
    spec: &MlpSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TensorModel, EvalError> {
    data.check_against(spec)?;
    if cfg.batch_size == 0 {
        return Err(EvalError::BadSpec("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers: Vec<Layer> = spec
        .layers()
        .map(|(n_in, n_out)| {
            let init = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("positive std");
            Layer {
                n_in,
                n_out,
                w: (0..n_in * n_out).map(|_| init.sample(&mut rng)).collect(),
                b: vec![0.0; n_out],
            }
        })
        .collect();
    let mut velocity = zeros_like(&layers);
    let xs: Vec<Vec<f64>> = data
        .features()
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = zeros_like(&layers);
            for &i in batch {
                backprop(&layers, &xs[i], data.labels()[i], &mut grad);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for ((l, v), g) in layers.iter_mut().zip(&mut velocity).zip(&grad) {
                for ((p, m), d) in l.w.iter_mut().zip(&mut v.w).zip(&g.w) {
                    *m = cfg.momentum * *m - step * d;
                    *p += *m;
                }
                for ((p, m), d) in l.b.iter_mut().zip(&mut v.b).zip(&g.b) {
                    *m = cfg.momentum * *m - step * d;
                    *p += *m;
                }
            }
        }
    }

    let values = layers
        .into_iter()
        .map(|l| {
            (
                l.w.into_iter().map(|v| v as f32).collect(),
                l.b.into_iter().map(|v| v as f32).collect(),
            )
        })
        .collect();
    model_from_layers("trained", spec, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalnet::top1_accuracy;

    #[test]
    fn learns_a_separable_problem() {
        // Class is the sign of the first feature.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..200 {
            let x: Vec<f32> = (0..3).map(|_| n.sample(&mut rng) as f32).collect();
            ys.push((x[0] > 0.0) as usize);
            xs.push(x);
        }
        let data = LabeledDataset::new(xs, ys).unwrap();
        let spec = MlpSpec::new(vec![3, 8, 2]).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..Default::default()
        };
        let m = train_classifier(&spec, &data, &cfg).unwrap();
        assert!(top1_accuracy(&spec, &m, &data).unwrap() > 0.95);
        assert_eq!(m, train_classifier(&spec, &data, &cfg).unwrap());
    }
}
