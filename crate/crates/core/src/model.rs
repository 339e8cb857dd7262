//! In-memory model representations.
//!
//! A [`TensorModel`] is the float form of a network (the thing inference runs
//! on). A [`QuantizedModel`] is its integer form at a fixed [`Bitwidth`] with
//! one scale per tensor (the thing the codec encodes). Both validate their
//! invariants on construction and are immutable afterwards.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::Digest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{0}`: shape must be non-empty with positive dimensions")]
    BadShape(String),
    #[error("tensor `{name}`: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("tensor `{name}`: code {value} outside the symmetric {bits}-bit range")]
    CodeOutOfRange { name: String, value: i64, bits: u32 },
    #[error("tensor `{name}`: scale {scale} is not a positive finite number")]
    BadScale { name: String, scale: f32 },
    #[error("unsupported bitwidth {0}")]
    UnsupportedBitwidth(u32),
    #[error("models differ in layout: {0}")]
    LayoutMismatch(String),
}

/// Integer precision levels supported for models and updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Bitwidth {
    B4,
    B8,
    B16,
    B32,
}

impl Bitwidth {
    pub const ALL: [Bitwidth; 4] = [Bitwidth::B4, Bitwidth::B8, Bitwidth::B16, Bitwidth::B32];
    /// Bitwidths an update may be transmitted at.
    pub const UPDATE: [Bitwidth; 3] = [Bitwidth::B8, Bitwidth::B16, Bitwidth::B32];

    pub const fn bits(self) -> u32 {
        match self {
            Bitwidth::B4 => 4,
            Bitwidth::B8 => 8,
            Bitwidth::B16 => 16,
            Bitwidth::B32 => 32,
        }
    }

    /// Largest representable code, `2^(bits-1) - 1`. The range is symmetric,
    /// so `-qmax` is the smallest code and `-2^(bits-1)` is never used.
    pub const fn qmax(self) -> i32 {
        match self {
            Bitwidth::B4 => 7,
            Bitwidth::B8 => 127,
            Bitwidth::B16 => 32_767,
            Bitwidth::B32 => i32::MAX,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self, ModelError> {
        match bits {
            4 => Ok(Bitwidth::B4),
            8 => Ok(Bitwidth::B8),
            16 => Ok(Bitwidth::B16),
            32 => Ok(Bitwidth::B32),
            other => Err(ModelError::UnsupportedBitwidth(other)),
        }
    }

    pub fn contains(self, code: i64) -> bool {
        let q = self.qmax() as i64;
        (-q..=q).contains(&code)
    }
}

impl TryFrom<u32> for Bitwidth {
    type Error = ModelError;
    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        Bitwidth::from_bits(bits)
    }
}

impl From<Bitwidth> for u32 {
    fn from(b: Bitwidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.bits())
    }
}

fn check_shape(name: &str, shape: &[usize], len: usize) -> Result<(), ModelError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(ModelError::BadShape(name.to_string()));
    }
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ModelError::BadShape(name.to_string()))?;
    if expected != len {
        return Err(ModelError::ShapeMismatch {
            name: name.to_string(),
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ModelError::DuplicateName(n.to_string()));
        }
    }
    Ok(())
}

/// One named float tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        check_shape(&name, &shape, values.len())?;
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { name, index });
        }
        Ok(Tensor {
            name,
            shape,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Named, ordered collection of float tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorModel {
    name: String,
    tensors: Vec<Tensor>,
}

impl TensorModel {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        check_unique(tensors.iter().map(|t| t.name()))?;
        Ok(TensorModel {
            name: name.into(),
            tensors,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Error unless `other` has the same tensor names, shapes and order.
    pub fn check_same_layout(&self, other: &TensorModel) -> Result<(), ModelError> {
        same_layout(
            self.tensors.iter().map(|t| (t.name(), t.shape())),
            other.tensors.iter().map(|t| (t.name(), t.shape())),
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

pub(crate) fn same_layout<'a>(
    a: impl ExactSizeIterator<Item = (&'a str, &'a [usize])>,
    b: impl ExactSizeIterator<Item = (&'a str, &'a [usize])>,
) -> Result<(), ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::LayoutMismatch(format!(
            "{} tensors vs {}",
            a.len(),
            b.len()
        )));
    }
    for ((na, sa), (nb, sb)) in a.zip(b) {
        if na != nb {
            return Err(ModelError::LayoutMismatch(format!(
                "tensor `{na}` vs `{nb}`"
            )));
        }
        if sa != sb {
            return Err(ModelError::LayoutMismatch(format!(
                "tensor `{na}`: shape {sa:?} vs {sb:?}"
            )));
        }
    }
    Ok(())
}

/// One named integer tensor with its dequantization scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    name: String,
    shape: Vec<usize>,
    qvalues: Vec<i32>,
    scale: f32,
}

impl QTensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        qvalues: Vec<i32>,
        scale: f32,
        bitwidth: Bitwidth,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        check_shape(&name, &shape, qvalues.len())?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ModelError::BadScale { name, scale });
        }
        if let Some(&q) = qvalues.iter().find(|&&q| !bitwidth.contains(q as i64)) {
            return Err(ModelError::CodeOutOfRange {
                name,
                value: q as i64,
                bits: bitwidth.bits(),
            });
        }
        Ok(QTensor {
            name,
            shape,
            qvalues,
            scale,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn qvalues(&self) -> &[i32] {
        &self.qvalues
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.qvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qvalues.is_empty()
    }
}

/// Integer form of a model: per-tensor codes and scales at one bitwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    name: String,
    bitwidth: Bitwidth,
    tensors: Vec<QTensor>,
}

impl QuantizedModel {
    /// Tensors must have been validated against `bitwidth`; this re-checks
    /// the code range so a tensor built for a wider grid cannot slip in.
    pub fn new(
        name: impl Into<String>,
        bitwidth: Bitwidth,
        tensors: Vec<QTensor>,
    ) -> Result<Self, ModelError> {
        check_unique(tensors.iter().map(|t| t.name()))?;
        for t in &tensors {
            if let Some(&q) = t.qvalues.iter().find(|&&q| !bitwidth.contains(q as i64)) {
                return Err(ModelError::CodeOutOfRange {
                    name: t.name.clone(),
                    value: q as i64,
                    bits: bitwidth.bits(),
                });
            }
        }
        Ok(QuantizedModel {
            name: name.into(),
            bitwidth,
            tensors,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bitwidth(&self) -> Bitwidth {
        self.bitwidth
    }

    pub fn tensors(&self) -> &[QTensor] {
        &self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(QTensor::len).sum()
    }
}

/// Repository listing entry for one precision of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub bitwidth: Bitwidth,
    pub encoded_size: u64,
    pub checksum: Digest,
}

/// What the server advertises for a model: every bitwidth it can deliver,
/// each with the size and digest of its bitstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelManifest {
    model_id: String,
    entries: Vec<ManifestEntry>,
}

impl ModelManifest {
    pub fn new(model_id: impl Into<String>, mut entries: Vec<ManifestEntry>) -> Result<Self, ModelError> {
        entries.sort_by_key(|e| e.bitwidth);
        if entries.windows(2).any(|w| w[0].bitwidth == w[1].bitwidth) {
            return Err(ModelError::LayoutMismatch(
                "manifest lists a bitwidth twice".into(),
            ));
        }
        Ok(ModelManifest {
            model_id: model_id.into(),
            entries,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn available_bitwidths(&self) -> impl Iterator<Item = Bitwidth> + '_ {
        self.entries.iter().map(|e| e.bitwidth)
    }

    pub fn entry(&self, bitwidth: Bitwidth) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.bitwidth == bitwidth)
    }
}

/// Difference norms for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorDelta {
    pub name: String,
    pub max_abs: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaNorms {
    pub tensors: Vec<TensorDelta>,
    pub global_max_abs: f64,
}

/// Per-tensor max-abs and Euclidean norms of `a - b`, computed in f64.
pub fn model_delta_norms(a: &TensorModel, b: &TensorModel) -> Result<DeltaNorms, ModelError> {
    a.check_same_layout(b)?;
    let tensors: Vec<TensorDelta> = a
        .tensors()
        .iter()
        .zip(b.tensors())
        .map(|(ta, tb)| {
            let (max_abs, sq) = ta.values().iter().zip(tb.values()).fold(
                (0.0f64, 0.0f64),
                |(m, s), (&x, &y)| {
                    let d = (x as f64 - y as f64).abs();
                    (m.max(d), s + d * d)
                },
            );
            TensorDelta {
                name: ta.name().to_string(),
                max_abs,
                l2: sq.sqrt(),
            }
        })
        .collect();
    let global_max_abs = tensors.iter().fold(0.0f64, |m, t| m.max(t.max_abs));
    Ok(DeltaNorms {
        tensors,
        global_max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: Vec<f32>) -> TensorModel {
        let n = values.len();
        TensorModel::new("m", vec![Tensor::new("w", vec![n], values).unwrap()]).unwrap()
    }

    #[test]
    fn rejects_duplicate_names() {
        let t = Tensor::new("w", vec![1], vec![0.0]).unwrap();
        assert_eq!(
            TensorModel::new("m", vec![t.clone(), t]),
            Err(ModelError::DuplicateName("w".into()))
        );
    }

    #[test]
    fn rejects_shape_value_mismatch_and_non_finite() {
        assert!(matches!(
            Tensor::new("w", vec![2, 2], vec![0.0; 3]),
            Err(ModelError::ShapeMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            Tensor::new("w", vec![2], vec![0.0, f32::NAN]),
            Err(ModelError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new("w", vec![0], vec![]),
            Err(ModelError::BadShape(_))
        ));
    }

    #[test]
    fn qtensor_enforces_symmetric_range() {
        assert!(QTensor::new("q", vec![2], vec![7, -7], 1.0, Bitwidth::B4).is_ok());
        assert!(matches!(
            QTensor::new("q", vec![1], vec![-8], 1.0, Bitwidth::B4),
            Err(ModelError::CodeOutOfRange { value: -8, .. })
        ));
        assert!(matches!(
            QTensor::new("q", vec![1], vec![i32::MIN], 1.0, Bitwidth::B32),
            Err(ModelError::CodeOutOfRange { .. })
        ));
        assert!(matches!(
            QTensor::new("q", vec![1], vec![0], 0.0, Bitwidth::B8),
            Err(ModelError::BadScale { .. })
        ));
    }

    #[test]
    fn delta_norms_of_identical_models_are_zero() {
        let m = single(vec![1.0, -2.0, 3.5]);
        let d = model_delta_norms(&m, &m).unwrap();
        assert_eq!(d.global_max_abs, 0.0);
        assert_eq!(d.tensors[0].l2, 0.0);
    }

    #[test]
    fn delta_norms_single_element() {
        let d = model_delta_norms(&single(vec![1.0]), &single(vec![0.5])).unwrap();
        assert_eq!(d.tensors[0].max_abs, 0.5);
        assert_eq!(d.tensors[0].l2, 0.5);
        assert_eq!(d.global_max_abs, 0.5);
    }

    #[test]
    fn delta_norms_reject_layout_mismatch() {
        let a = single(vec![1.0, 2.0]);
        let b = single(vec![1.0]);
        assert!(matches!(
            model_delta_norms(&a, &b),
            Err(ModelError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn bitwidth_ranges() {
        assert_eq!(Bitwidth::B4.qmax(), 7);
        assert_eq!(Bitwidth::B32.qmax(), 2_147_483_647);
        assert!(Bitwidth::from_bits(5).is_err());
    }
}
