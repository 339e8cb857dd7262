//! Precision updates: the quantized difference between a high-precision model
//! and the low-precision model a client already holds.
//!
//! `Δ = high - low` is taken element-wise in the float domain (exact in f64),
//! then quantized at the update bitwidth with its own per-tensor max-abs scale.
//! The receiver rebuilds the proxy as `low + dequantize(Δ)`.

use thiserror::Error;

use crate::checksum::Digest;
use crate::model::{Bitwidth, ModelError, QTensor, Tensor, TensorModel};
use crate::quant::quantize_values;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("update targets base {expected} but the model in use is {actual}")]
    ChecksumMismatch { expected: Digest, actual: Digest },
    #[error("{0} is not a valid update bitwidth (8, 16 or 32)")]
    BadUpdateBitwidth(Bitwidth),
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Quantized `Δ = W_high - W_low`, bound to the exact base bitstream it patches.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateModel {
    model_id: String,
    base_bitwidth: Bitwidth,
    update_bitwidth: Bitwidth,
    base_checksum: Digest,
    tensors: Vec<QTensor>,
}

impl UpdateModel {
    pub fn new(
        model_id: impl Into<String>,
        base_bitwidth: Bitwidth,
        update_bitwidth: Bitwidth,
        base_checksum: Digest,
        tensors: Vec<QTensor>,
    ) -> Result<Self, UpdateError> {
        if !Bitwidth::UPDATE.contains(&update_bitwidth) {
            return Err(UpdateError::BadUpdateBitwidth(update_bitwidth));
        }
        // Reuse the quantized-model checks for names and code ranges.
        crate::model::QuantizedModel::new("", update_bitwidth, tensors.clone())?;
        Ok(UpdateModel {
            model_id: model_id.into(),
            base_bitwidth,
            update_bitwidth,
            base_checksum,
            tensors,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn base_bitwidth(&self) -> Bitwidth {
        self.base_bitwidth
    }

    pub fn update_bitwidth(&self) -> Bitwidth {
        self.update_bitwidth
    }

    pub fn base_checksum(&self) -> &Digest {
        &self.base_checksum
    }

    pub fn tensors(&self) -> &[QTensor] {
        &self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(QTensor::len).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.qvalues().iter().all(|&q| q == 0))
    }
}

fn deltas(high: &Tensor, low: &Tensor) -> (Vec<f64>, f64) {
    let d: Vec<f64> = high
        .values()
        .iter()
        .zip(low.values())
        .map(|(&h, &l)| h as f64 - l as f64)
        .collect();
    let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (d, max)
}

/// Largest `|Δ|` of every tensor, in model order.
pub fn max_abs_deltas(high: &TensorModel, low: &TensorModel) -> Result<Vec<f64>, UpdateError> {
    high.check_same_layout(low)?;
    Ok(high
        .tensors()
        .iter()
        .zip(low.tensors())
        .map(|(h, l)| deltas(h, l).1)
        .collect())
}

/// Half a grid step of the update quantizer for a tensor whose largest `|Δ|`
/// is `max_delta`: the worst-case reconstruction error before float rounding.
pub fn update_error_bound(max_delta: f64, bitwidth: Bitwidth) -> f64 {
    max_delta / bitwidth.qmax() as f64 / 2.0
}

pub fn compute_update(
    high: &TensorModel,
    low: &TensorModel,
    update_bitwidth: Bitwidth,
    base_bitwidth: Bitwidth,
    base_checksum: Digest,
) -> Result<UpdateModel, UpdateError> {
    if !Bitwidth::UPDATE.contains(&update_bitwidth) {
        return Err(UpdateError::BadUpdateBitwidth(update_bitwidth));
    }
    high.check_same_layout(low)?;
    let tensors = high
        .tensors()
        .iter()
        .zip(low.tensors())
        .map(|(h, l)| {
            let (d, max) = deltas(h, l);
            let (codes, scale) = quantize_values(&d, max, update_bitwidth);
            QTensor::new(h.name(), h.shape().to_vec(), codes, scale, update_bitwidth)
        })
        .collect::<Result<Vec<_>, _>>()?;
    UpdateModel::new(low.name(), base_bitwidth, update_bitwidth, base_checksum, tensors)
}

/// Rebuilds the high-precision proxy `low + dequantize(Δ)`.
///
/// `low_checksum` identifies the base artifact `low` was decoded from; the
/// update is refused unless it was computed against that same artifact.
pub fn apply_update(
    low: &TensorModel,
    low_checksum: &Digest,
    update: &UpdateModel,
) -> Result<TensorModel, UpdateError> {
    if update.base_checksum != *low_checksum {
        return Err(UpdateError::ChecksumMismatch {
            expected: update.base_checksum,
            actual: *low_checksum,
        });
    }
    crate::model::same_layout(
        low.tensors().iter().map(|t| (t.name(), t.shape())),
        update.tensors.iter().map(|t| (t.name(), t.shape())),
    )?;
    let tensors = low
        .tensors()
        .iter()
        .zip(&update.tensors)
        .map(|(l, u)| {
            let scale = u.scale() as f64;
            let values = l
                .values()
                .iter()
                .zip(u.qvalues())
                .map(|(&v, &q)| (v as f64 + q as f64 * scale) as f32)
                .collect();
            Tensor::new(l.name(), l.shape().to_vec(), values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TensorModel::new(low.name(), tensors)?)
}

/// Smallest update bitwidth in {8, 16, 32} whose half-step error bound
/// `|Δ|max / (2^(b-1) - 1) / 2` stays within `tolerance` for every tensor.
/// Falls back to 32 when nothing narrower qualifies.
pub fn select_update_bitwidth(
    high: &TensorModel,
    low: &TensorModel,
    tolerance: f64,
) -> Result<Bitwidth, UpdateError> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(UpdateError::BadTolerance(tolerance));
    }
    let maxima = max_abs_deltas(high, low)?;
    Ok(Bitwidth::UPDATE
        .into_iter()
        .find(|&b| maxima.iter().all(|&m| update_error_bound(m, b) <= tolerance))
        .unwrap_or(Bitwidth::B32))
}
