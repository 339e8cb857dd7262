//! Seeded synthetic models, inputs and datasets.
//!
//! Every generator draws from `ChaCha8Rng::seed_from_u64(seed)`, so output is
//! identical across runs and platforms for the same arguments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::evalnet::{LabeledDataset, MlpSpec};
use crate::model::{Tensor, TensorModel};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("standard deviation must be finite and non-negative")
}

/// A model with the given tensor layout and i.i.d. `N(0, std²)` values.
pub fn gaussian_model(name: &str, layout: &[(String, Vec<usize>)], std: f64, seed: u64) -> TensorModel {
    let mut r = rng(seed);
    let dist = normal(std);
    let tensors = layout
        .iter()
        .map(|(tname, shape)| {
            let n = shape.iter().product();
            let values = (0..n).map(|_| dist.sample(&mut r) as f32).collect();
            Tensor::new(tname.clone(), shape.clone(), values).expect("layout is well formed")
        })
        .collect();
    TensorModel::new(name, tensors).expect("layout names are unique")
}

/// Weights for `spec`: He-normal (`std = sqrt(2 / fan_in)`) weights and
/// `N(0, 0.1²)` biases.
pub fn gaussian_mlp(spec: &MlpSpec, seed: u64) -> TensorModel {
    let mut r = rng(seed);
    let mut tensors = Vec::new();
    for (i, (n_in, n_out)) in spec.layers().enumerate() {
        let w = normal((2.0 / n_in as f64).sqrt());
        let b = normal(0.1);
        let wv = (0..n_in * n_out).map(|_| w.sample(&mut r) as f32).collect();
        let bv = (0..n_out).map(|_| b.sample(&mut r) as f32).collect();
        tensors.push(Tensor::new(format!("layer{i}.weight"), vec![n_out, n_in], wv).unwrap());
        tensors.push(Tensor::new(format!("layer{i}.bias"), vec![n_out], bv).unwrap());
    }
    TensorModel::new("mlp", tensors).expect("generated names are unique")
}

/// `n` standard-normal input vectors of width `dim`.
pub fn gaussian_inputs(dim: usize, n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| StandardNormal.sample(&mut r))
                .map(|v: f64| v as f32)
                .collect()
        })
        .collect()
}

/// Gaussian class clusters. Centres are standard normal in `dim` dimensions;
/// each of the `per_class` points per class adds `N(0, spread²)` noise.
/// Rows are shuffled.
pub fn blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> LabeledDataset {
    let mut r = rng(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let noise = normal(spread);
    let mut rows: Vec<(Vec<f32>, usize)> = Vec::with_capacity(classes * per_class);
    for (label, c) in centres.iter().enumerate() {
        for _ in 0..per_class {
            rows.push((c.iter().map(|&m| (m + noise.sample(&mut r)) as f32).collect(), label));
        }
    }
    rows.shuffle(&mut r);
    let (features, labels) = rows.into_iter().unzip();
    LabeledDataset::new(features, labels).expect("rows have equal width")
}

/// `n` points uniform on `[-1, 1]²`, labelled by the colour of a
/// `cells × cells` checkerboard. Fitting it well takes many precisely placed
/// ReLU boundaries, which makes it sensitive to coarse weights.
pub fn checkerboard(n: usize, cells: usize, seed: u64) -> LabeledDataset {
    let mut r = rng(seed);
    let half = cells as f32 / 2.0;
    let (features, labels) = (0..n)
        .map(|_| {
            let x: f32 = r.random_range(-1.0..1.0);
            let y: f32 = r.random_range(-1.0..1.0);
            let cell = (x * half).floor() as i64 + (y * half).floor() as i64;
            (vec![x, y], cell.rem_euclid(2) as usize)
        })
        .unzip();
    LabeledDataset::new(features, labels).expect("rows have equal width")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generators_are_reproducible() {
        let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
        assert_eq!(gaussian_mlp(&spec, 7), gaussian_mlp(&spec, 7));
        assert_ne!(gaussian_mlp(&spec, 7), gaussian_mlp(&spec, 8));
        assert_eq!(gaussian_inputs(4, 3, 1), gaussian_inputs(4, 3, 1));
        assert_eq!(blobs(3, 2, 5, 0.5, 2), blobs(3, 2, 5, 0.5, 2));
    }

    #[test]
    fn mlp_layout_matches_spec() {
        let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
        let m = gaussian_mlp(&spec, 0);
        let layout: Vec<(String, Vec<usize>)> = m
            .tensors()
            .iter()
            .map(|t| (t.name().to_string(), t.shape().to_vec()))
            .collect();
        assert_eq!(layout, spec.tensor_layout());
    }

    #[test]
    fn checkerboard_colours() {
        let d = checkerboard(500, 4, 3);
        for (x, y) in d.rows() {
            let cell = (x[0] * 2.0).floor() as i64 + (x[1] * 2.0).floor() as i64;
            assert_eq!(y as i64, cell.rem_euclid(2));
        }
        let ones = d.labels().iter().filter(|&&y| y == 1).count();
        assert!((200..300).contains(&ones));
    }

    #[test]
    fn blobs_have_every_class() {
        let d = blobs(4, 3, 10, 0.1, 0);
        assert_eq!(d.len(), 40);
        for c in 0..4 {
            assert_eq!(d.labels().iter().filter(|&&y| y == c).count(), 10);
        }
    }
}
