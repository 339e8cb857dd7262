//! `P2UM` container: bit-exact on-disk form of a [`TensorModel`].
//!
//! ```text
//! "P2UM"                      4 bytes magic
//! version          u32 LE     currently 1
//! model name       u32 LE length + UTF-8
//! tensor count     u32 LE
//! per tensor, in model order:
//!   name           u32 LE length + UTF-8
//!   rank           u32 LE
//!   dims           rank x u32 LE
//!   values         prod(dims) x f32 LE (IEEE-754, row-major)
//! digest           32 bytes SHA-256 over every preceding byte
//! ```
//!
//! The byte layout is also documented in `FORMATS.md` at the repository root.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::bytes::{put_shape, put_str, put_u32, ByteReader, Exhausted};
use crate::checksum::{Digest, DIGEST_LEN};
use crate::model::{ModelError, Tensor, TensorModel};

pub const MODEL_MAGIC: &[u8; 4] = b"P2UM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a P2UM file (bad magic)")]
    BadMagic,
    #[error("unsupported P2UM version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("digest mismatch: file is corrupted")]
    DigestMismatch,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<Exhausted> for StoreError {
    fn from(_: Exhausted) -> Self {
        StoreError::Truncated
    }
}

/// Serializes `model` into its P2UM byte form.
pub fn encode_model(model: &TensorModel) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::with_capacity(64 + model.num_parameters() * 4);
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_FORMAT_VERSION);
    put_str(&mut out, model.name());
    put_u32(&mut out, model.tensors().len() as u32);
    for t in model.tensors() {
        if t.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(StoreError::Malformed(format!(
                "tensor `{}` has a dimension above u32::MAX",
                t.name()
            )));
        }
        put_str(&mut out, t.name());
        put_shape(&mut out, t.shape());
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Digest::of(&out);
    out.extend_from_slice(digest.as_bytes());
    Ok(out)
}

struct RawTensor<'a> {
    name: String,
    shape: Vec<usize>,
    values: &'a [u8],
}

fn read_string(r: &mut ByteReader<'_>) -> Result<String, StoreError> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| StoreError::Malformed("name is not UTF-8".into()))
}

/// Parses P2UM bytes, verifying the digest before any tensor is built.
pub fn decode_model(bytes: &[u8]) -> Result<TensorModel, StoreError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }

    // Structural pass: find where the body ends without trusting any values.
    let name = read_string(&mut r)?;
    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let tname = read_string(&mut r)?;
        let rank = r.u32()? as usize;
        if rank > r.remaining() / 4 {
            return Err(StoreError::Truncated);
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StoreError::Malformed(format!("tensor `{tname}` is too large")))?;
        let values = r.take(n)?;
        raw.push(RawTensor {
            name: tname,
            shape,
            values,
        });
    }
    let body_end = r.position();
    let trailer: [u8; DIGEST_LEN] = r.array()?;
    if r.remaining() != 0 {
        return Err(StoreError::Malformed(format!(
            "{} trailing bytes after digest",
            r.remaining()
        )));
    }
    if Digest::of(&bytes[..body_end]) != Digest::from_bytes(trailer) {
        return Err(StoreError::DigestMismatch);
    }

    let tensors = raw
        .into_iter()
        .map(|t| {
            let values = t
                .values
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(t.name, t.shape, values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TensorModel::new(name, tensors)?)
}

/// Writes `model` to `path` as a P2UM file.
///
/// Non-finite values cannot reach this point: [`TensorModel`] rejects them at
/// construction.
pub fn save_model(model: &TensorModel, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TensorModel, StoreError> {
    let bytes = fs::read(path)?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros() -> TensorModel {
        TensorModel::new("m", vec![Tensor::new("w", vec![2], vec![0.0, 0.0]).unwrap()]).unwrap()
    }

    #[test]
    fn fixed_length_for_tiny_model() {
        // magic 4 + version 4 + name (4+1) + count 4 + tensor name (4+1)
        // + rank 4 + dim 4 + values 8 + digest 32
        let bytes = encode_model(&zeros()).unwrap();
        assert_eq!(bytes.len(), 70);
        assert_eq!(&bytes[..4], b"P2UM");
        assert_eq!(decode_model(&bytes).unwrap(), zeros());
    }

    #[test]
    fn keeps_insertion_order() {
        let m = TensorModel::new(
            "m",
            vec![
                Tensor::new("b", vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
                Tensor::new("a", vec![1], vec![4.0]).unwrap(),
            ],
        )
        .unwrap();
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        let names: Vec<_> = back.tensors().iter().map(|t| t.name()).collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn empty_input_is_truncated() {
        assert!(matches!(decode_model(&[]), Err(StoreError::Truncated)));
    }

    #[test]
    fn distinct_header_errors() {
        let mut bytes = encode_model(&zeros()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(StoreError::BadMagic)));

        let mut bytes = encode_model(&zeros()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_model(&bytes),
            Err(StoreError::UnsupportedVersion(9))
        ));

        let bytes = encode_model(&zeros()).unwrap();
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 1]),
            Err(StoreError::Truncated)
        ));
    }

    #[test]
    fn flipped_value_byte_fails_digest() {
        let mut bytes = encode_model(&zeros()).unwrap();
        let values_at = bytes.len() - 32 - 8;
        bytes[values_at + 3] ^= 0x40;
        assert!(matches!(
            decode_model(&bytes),
            Err(StoreError::DigestMismatch)
        ));
    }
}
