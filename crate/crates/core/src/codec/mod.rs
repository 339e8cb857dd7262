//! Lossless entropy coding of quantized models and updates into `P2UB`
//! bitstreams.
//!
//! ```text
//! "P2UB"                 4 bytes magic
//! version      u16 LE    currently 1
//! kind         u8        0 = model, 1 = update
//! bitwidth     u8        code bitwidth (4/8/16/32; update: 8/16/32)
//! model id     u32 LE length + UTF-8
//! [kind == 1]  base bitwidth u8, base checksum 32 bytes
//! tensor count u32 LE
//! per tensor:  name (u32 LE length + UTF-8), rank u32 LE, dims rank x u32 LE,
//!              scale as raw IEEE-754 f32 bits u32 LE
//! payload len  u64 LE
//! payload      arithmetic-coded codes of every tensor in order
//! digest       32 bytes SHA-256 over every preceding byte
//! ```
//!
//! The payload is empty when the model has no tensors. See `FORMATS.md` for
//! the binarization and context layout.

mod cabac;
mod symbols;

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bytes::{put_shape, put_str, put_u32, ByteReader};
use crate::checksum::{Digest, DIGEST_LEN};
use crate::model::{Bitwidth, ModelError, QTensor, QuantizedModel};
use crate::update::{UpdateError, UpdateModel};

pub use cabac::BinContext;
pub use symbols::ContextModel;

use cabac::{ArithDecoder, ArithEncoder, BitCounter, BitSink, BitWriter};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"P2UB";
pub const BITSTREAM_VERSION: u16 = 1;

const KIND_MODEL: u8 = 0;
const KIND_UPDATE: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("not a P2UB bitstream (bad magic)")]
    BadMagic,
    #[error("unsupported P2UB version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload exhausted before all codes were decoded")]
    PayloadExhausted,
    #[error("digest mismatch: bitstream is corrupted")]
    DigestMismatch,
    #[error("payload does not decode to a valid code sequence")]
    CorruptPayload,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Update(#[from] UpdateError),
}

/// Something the codec can encode.
#[derive(Clone, Copy, Debug)]
pub enum PayloadRef<'a> {
    Model(&'a QuantizedModel),
    Update(&'a UpdateModel),
}

impl<'a> From<&'a QuantizedModel> for PayloadRef<'a> {
    fn from(m: &'a QuantizedModel) -> Self {
        PayloadRef::Model(m)
    }
}

impl<'a> From<&'a UpdateModel> for PayloadRef<'a> {
    fn from(u: &'a UpdateModel) -> Self {
        PayloadRef::Update(u)
    }
}

/// What a bitstream decodes to.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Model(QuantizedModel),
    Update(UpdateModel),
}

impl Payload {
    pub fn into_model(self) -> Option<QuantizedModel> {
        match self {
            Payload::Model(m) => Some(m),
            Payload::Update(_) => None,
        }
    }

    pub fn into_update(self) -> Option<UpdateModel> {
        match self {
            Payload::Update(u) => Some(u),
            Payload::Model(_) => None,
        }
    }
}

impl PayloadRef<'_> {
    fn model_id(&self) -> &str {
        match self {
            PayloadRef::Model(m) => m.name(),
            PayloadRef::Update(u) => u.model_id(),
        }
    }

    fn bitwidth(&self) -> Bitwidth {
        match self {
            PayloadRef::Model(m) => m.bitwidth(),
            PayloadRef::Update(u) => u.update_bitwidth(),
        }
    }

    fn tensors(&self) -> &[QTensor] {
        match self {
            PayloadRef::Model(m) => m.tensors(),
            PayloadRef::Update(u) => u.tensors(),
        }
    }
}

/// An encoded model or update, exactly as transmitted.
#[derive(Clone, PartialEq, Eq)]
pub struct Bitstream {
    bytes: Vec<u8>,
    checksum: Digest,
}

impl std::fmt::Debug for Bitstream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bitstream")
            .field("len", &self.bytes.len())
            .field("checksum", &self.checksum)
            .finish()
    }
}

impl Bitstream {
    /// Wraps received bytes. Nothing is validated until [`decode`].
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let checksum = Digest::of(&bytes);
        Bitstream { bytes, checksum }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// SHA-256 of the whole bitstream. Updates name their base by this value.
    pub fn checksum(&self) -> Digest {
        self.checksum
    }
}

fn write_header(out: &mut Vec<u8>, payload: PayloadRef<'_>) {
    out.extend_from_slice(BITSTREAM_MAGIC);
    out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
    match payload {
        PayloadRef::Model(_) => out.push(KIND_MODEL),
        PayloadRef::Update(_) => out.push(KIND_UPDATE),
    }
    out.push(payload.bitwidth().bits() as u8);
    put_str(out, payload.model_id());
    if let PayloadRef::Update(u) = payload {
        out.push(u.base_bitwidth().bits() as u8);
        out.extend_from_slice(u.base_checksum().as_bytes());
    }
    put_u32(out, payload.tensors().len() as u32);
    for t in payload.tensors() {
        put_str(out, t.name());
        put_shape(out, t.shape());
        put_u32(out, t.scale().to_bits());
    }
}

fn code_payload<S: BitSink>(sink: S, payload: PayloadRef<'_>) -> Option<S> {
    let tensors = payload.tensors();
    if tensors.is_empty() {
        return None;
    }
    let mut enc = ArithEncoder::new(sink);
    let mut ctx = ContextModel::default();
    for t in tensors {
        symbols::encode_codes(&mut enc, &mut ctx, payload.bitwidth(), t.qvalues());
    }
    Some(enc.finish())
}

/// Encodes a quantized model or update. Output is a pure function of the input.
pub fn encode<'a>(payload: impl Into<PayloadRef<'a>>) -> Bitstream {
    let payload = payload.into();
    let mut out = Vec::new();
    write_header(&mut out, payload);
    let body = code_payload(BitWriter::default(), payload)
        .map(BitWriter::into_bytes)
        .unwrap_or_default();
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Digest::of(&out);
    out.extend_from_slice(digest.as_bytes());
    Bitstream::from_bytes(out)
}

/// [`encode`] plus its wall-clock duration.
pub fn encode_timed<'a>(payload: impl Into<PayloadRef<'a>>) -> (Bitstream, Duration) {
    let start = Instant::now();
    let b = encode(payload);
    (b, start.elapsed())
}

/// Byte length of `encode(payload)`, computed without materializing it.
pub fn encoded_size<'a>(payload: impl Into<PayloadRef<'a>>) -> u64 {
    let payload = payload.into();
    let mut header = Vec::new();
    write_header(&mut header, payload);
    let body_bits = code_payload(BitCounter::default(), payload)
        .map(|c| c.bits_written())
        .unwrap_or(0);
    header.len() as u64 + 8 + body_bits.div_ceil(8) + DIGEST_LEN as u64
}

struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    scale: f32,
    len: usize,
}

fn header_err(what: &str) -> CodecError {
    CodecError::MalformedHeader(what.to_string())
}

fn read_str(r: &mut ByteReader<'_>, what: &str) -> Result<String, CodecError> {
    let len = r.u32().map_err(|_| header_err(what))? as usize;
    let bytes = r.take(len).map_err(|_| header_err(what))?;
    String::from_utf8(bytes.to_vec()).map_err(|_| header_err(&format!("{what} is not UTF-8")))
}

/// Decodes a bitstream. Checks run in order: magic, version, header
/// structure, payload length, digest, then the entropy-coded payload.
pub fn decode(bitstream: &Bitstream) -> Result<Payload, CodecError> {
    let bytes = bitstream.as_bytes();
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).map_err(|_| header_err("truncated magic"))?;
    if magic != BITSTREAM_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = r.u16().map_err(|_| header_err("truncated version"))?;
    if version != BITSTREAM_VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let kind = r.u8().map_err(|_| header_err("truncated kind"))?;
    if kind != KIND_MODEL && kind != KIND_UPDATE {
        return Err(header_err(&format!("unknown payload kind {kind}")));
    }
    let bw = r.u8().map_err(|_| header_err("truncated bitwidth"))?;
    let bitwidth = Bitwidth::from_bits(bw as u32)
        .map_err(|_| header_err(&format!("bitwidth {bw}")))?;
    let model_id = read_str(&mut r, "model id")?;
    let base = if kind == KIND_UPDATE {
        let bb = r.u8().map_err(|_| header_err("truncated base bitwidth"))?;
        let base_bw = Bitwidth::from_bits(bb as u32)
            .map_err(|_| header_err(&format!("base bitwidth {bb}")))?;
        let sum: [u8; DIGEST_LEN] = r.array().map_err(|_| header_err("truncated base checksum"))?;
        Some((base_bw, Digest::from_bytes(sum)))
    } else {
        None
    };
    let count = r.u32().map_err(|_| header_err("truncated tensor count"))? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = read_str(&mut r, "tensor name")?;
        let rank = r.u32().map_err(|_| header_err("truncated rank"))? as usize;
        if rank > r.remaining() / 4 {
            return Err(header_err("truncated dims"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()
            .map_err(|_| header_err("truncated dims"))?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| header_err("tensor too large"))?;
        let scale = r.f32().map_err(|_| header_err("truncated scale"))?;
        headers.push(TensorHeader {
            name,
            shape,
            scale,
            len,
        });
    }
    let payload_len = r.u64().map_err(|_| header_err("truncated payload length"))?;
    if payload_len > r.remaining() as u64 {
        return Err(CodecError::PayloadExhausted);
    }
    let body = r.take(payload_len as usize).expect("length checked");
    let body_end = r.position();
    let trailer: [u8; DIGEST_LEN] = r.array().map_err(|_| CodecError::PayloadExhausted)?;
    if r.remaining() != 0 {
        return Err(header_err("bytes after the digest"));
    }
    if Digest::of(&bytes[..body_end]) != Digest::from_bytes(trailer) {
        return Err(CodecError::DigestMismatch);
    }

    let mut tensors = Vec::with_capacity(headers.len());
    if headers.is_empty() {
        if !body.is_empty() {
            return Err(CodecError::CorruptPayload);
        }
    } else {
        let mut dec = ArithDecoder::new(body);
        let mut ctx = ContextModel::default();
        for h in headers {
            let mut codes = Vec::new();
            symbols::decode_codes(&mut dec, &mut ctx, bitwidth, &mut codes, h.len)
                .map_err(|_| CodecError::CorruptPayload)?;
            if dec.overrun() {
                return Err(CodecError::PayloadExhausted);
            }
            tensors.push(QTensor::new(h.name, h.shape, codes, h.scale, bitwidth)?);
        }
        if !dec.finish() {
            return Err(CodecError::CorruptPayload);
        }
    }

    Ok(match base {
        None => Payload::Model(QuantizedModel::new(model_id, bitwidth, tensors)?),
        Some((base_bw, sum)) => {
            Payload::Update(UpdateModel::new(model_id, base_bw, bitwidth, sum, tensors)?)
        }
    })
}

/// [`decode`] plus its wall-clock duration.
pub fn decode_timed(bitstream: &Bitstream) -> Result<(Payload, Duration), CodecError> {
    let start = Instant::now();
    let p = decode(bitstream)?;
    Ok((p, start.elapsed()))
}

/// Bytes the codes of `tensors` would take if packed at `bitwidth` bits each
/// with no entropy coding.
pub fn raw_packed_size(num_codes: usize, bitwidth: Bitwidth) -> u64 {
    (num_codes as u64 * bitwidth.bits() as u64).div_ceil(8)
}

/// Payload bytes only (no header or digest) for a model or update.
pub fn payload_size<'a>(payload: impl Into<PayloadRef<'a>>) -> u64 {
    code_payload(BitCounter::default(), payload.into())
        .map(|c| c.bits_written().div_ceil(8))
        .unwrap_or(0)
}
