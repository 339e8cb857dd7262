//! Per-tensor symmetric uniform quantization.
//!
//! For a tensor with largest magnitude `m` at bitwidth `b`, the scale is
//! `m / (2^(b-1) - 1)` and each value maps to `round_half_even(v / scale)`.
//! The rounding is done on the exact ratio `v * qmax / m` in f64, so a value
//! that sits exactly halfway between two grid points is a true tie even
//! though the stored f32 scale is inexact. An all-zero tensor gets scale 1.

use crate::model::{Bitwidth, QTensor, QuantizedModel, Tensor, TensorModel};

/// Target precision. Rounding is always round-half-to-even.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizationSpec {
    pub bitwidth: Bitwidth,
}

impl QuantizationSpec {
    pub const fn new(bitwidth: Bitwidth) -> Self {
        QuantizationSpec { bitwidth }
    }
}

impl From<Bitwidth> for QuantizationSpec {
    fn from(bitwidth: Bitwidth) -> Self {
        QuantizationSpec { bitwidth }
    }
}

/// Quantizes f64 values whose largest magnitude is `max_abs` onto the
/// symmetric grid of `bitwidth`. Returns the codes and the f32 scale.
pub(crate) fn quantize_values(values: &[f64], max_abs: f64, bitwidth: Bitwidth) -> (Vec<i32>, f32) {
    let qmax = bitwidth.qmax() as f64;
    if max_abs == 0.0 {
        return (vec![0; values.len()], 1.0);
    }
    let clamp = |r: f64| r.round_ties_even().clamp(-qmax, qmax) as i32;
    let scale = (max_abs / qmax) as f32;
    if scale.is_normal() {
        let codes = values.iter().map(|&v| clamp(v / max_abs * qmax)).collect();
        (codes, scale)
    } else {
        // The ideal scale underflows f32; fall back to rounding against the
        // scale that will actually be stored.
        let scale = scale.max(f32::from_bits(1));
        let codes = values.iter().map(|&v| clamp(v / scale as f64)).collect();
        (codes, scale)
    }
}

pub fn quantize_tensor(tensor: &Tensor, bitwidth: Bitwidth) -> QTensor {
    let values: Vec<f64> = tensor.values().iter().map(|&v| v as f64).collect();
    let (codes, scale) = quantize_values(&values, tensor.max_abs() as f64, bitwidth);
    QTensor::new(tensor.name(), tensor.shape().to_vec(), codes, scale, bitwidth)
        .expect("quantized codes are clamped to the symmetric range")
}

pub fn quantize(model: &TensorModel, spec: impl Into<QuantizationSpec>) -> QuantizedModel {
    let bitwidth = spec.into().bitwidth;
    let tensors = model
        .tensors()
        .iter()
        .map(|t| quantize_tensor(t, bitwidth))
        .collect();
    QuantizedModel::new(model.name(), bitwidth, tensors).expect("layout copied from a valid model")
}

/// Re-quantizes `tensor` against a given scale instead of recalibrating.
/// Grid points `q * scale` are fixed points of this map as long as `q * scale`
/// is exact enough in f32 (always true for 4-, 8- and 16-bit codes).
pub fn quantize_with_scale(tensor: &Tensor, scale: f32, bitwidth: Bitwidth) -> QTensor {
    let qmax = bitwidth.qmax() as f64;
    let codes = tensor
        .values()
        .iter()
        .map(|&v| (v as f64 / scale as f64).round_ties_even().clamp(-qmax, qmax) as i32)
        .collect();
    QTensor::new(tensor.name(), tensor.shape().to_vec(), codes, scale, bitwidth)
        .expect("codes are clamped and the scale came from a valid tensor")
}

/// `q * scale` in f64, rounded once to f32. Saturates at `±f32::MAX`, which is
/// only reachable with a hand-built scale near the top of the f32 range.
pub(crate) fn dequantize_code(q: i32, scale: f32) -> f32 {
    let v = (q as f64 * scale as f64) as f32;
    v.clamp(-f32::MAX, f32::MAX)
}

pub fn dequantize_tensor(q: &QTensor) -> Tensor {
    let values = q
        .qvalues()
        .iter()
        .map(|&c| dequantize_code(c, q.scale()))
        .collect();
    Tensor::new(q.name(), q.shape().to_vec(), values).expect("dequantized values are finite")
}

pub fn dequantize(qmodel: &QuantizedModel) -> TensorModel {
    let tensors = qmodel.tensors().iter().map(dequantize_tensor).collect();
    TensorModel::new(qmodel.name(), tensors).expect("layout copied from a valid model")
}

/// `‖w - dequantize(quantize(w))‖∞` for each tensor, in model order.
pub fn quantization_error(model: &TensorModel, spec: impl Into<QuantizationSpec>) -> Vec<(String, f64)> {
    let bitwidth = spec.into().bitwidth;
    model
        .tensors()
        .iter()
        .map(|t| {
            let q = quantize_tensor(t, bitwidth);
            let err = t
                .values()
                .iter()
                .zip(q.qvalues())
                .map(|(&v, &c)| (v as f64 - dequantize_code(c, q.scale()) as f64).abs())
                .fold(0.0f64, f64::max);
            (t.name().to_string(), err)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(values: Vec<f32>) -> Tensor {
        let n = values.len();
        Tensor::new("w", vec![n], values).unwrap()
    }

    #[test]
    fn all_zero_tensor_gets_unit_scale() {
        let q = quantize_tensor(&tensor(vec![0.0; 3]), Bitwidth::B8);
        assert_eq!(q.qvalues(), &[0, 0, 0]);
        assert_eq!(q.scale(), 1.0);
        let back = dequantize_tensor(&q);
        assert_eq!(back.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn four_bit_half_even_example() {
        // -0.5 * 7 = -3.5 is a tie and goes to -4; 0.25 * 7 = 1.75 goes to 2.
        let q = quantize_tensor(&tensor(vec![1.0, -0.5, 0.25]), Bitwidth::B4);
        assert_eq!(q.qvalues(), &[7, -4, 2]);
        assert_eq!(q.scale(), (1.0f64 / 7.0) as f32);
    }

    #[test]
    fn extremes_map_to_range_ends() {
        for b in Bitwidth::ALL {
            let q = quantize_tensor(&tensor(vec![-2.0, 2.0]), b);
            assert_eq!(q.qvalues(), &[-b.qmax(), b.qmax()], "{b}");
        }
    }

    #[test]
    fn dequantize_by_multiplication() {
        let scale = (1.0f64 / 7.0) as f32;
        let q = QTensor::new("w", vec![3], vec![7, -4, 2], scale, Bitwidth::B4).unwrap();
        let d = dequantize_tensor(&q);
        let expected: Vec<f32> = [7.0f64, -4.0, 2.0]
            .iter()
            .map(|c| (c * scale as f64) as f32)
            .collect();
        assert_eq!(d.values(), expected.as_slice());
        assert_eq!(d.values()[0], 1.0);
        assert!((d.values()[1] as f64 + 4.0 / 7.0).abs() < 1e-7);
        assert!((d.values()[2] as f64 - 2.0 / 7.0).abs() < 1e-7);
    }

    #[test]
    fn thirty_two_bit_is_near_lossless() {
        let t = tensor(vec![0.1, -0.7, 3.3e-3, 1.5]);
        let err = quantization_error(&TensorModel::new("m", vec![t]).unwrap(), Bitwidth::B32);
        // One grid step is ~7e-10 here, far below f32 resolution of the values.
        assert!(err[0].1 <= 1.5 * f32::EPSILON as f64);
    }

    #[test]
    fn underflowing_scale_falls_back_to_stored_scale() {
        let tiny = f32::from_bits(3);
        let q = quantize_tensor(&tensor(vec![tiny, -tiny]), Bitwidth::B32);
        assert_eq!(q.scale(), f32::from_bits(1));
        assert_eq!(q.qvalues(), &[3, -3]);
        assert_eq!(dequantize_tensor(&q).values(), &[tiny, -tiny]);
    }
}
