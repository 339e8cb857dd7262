//! Message framing.
//!
//! Each frame is `len: u32 LE | tag: u8 | version: u8 | body`, where `len`
//! counts the tag, version and body bytes. Integers are little-endian,
//! strings are `u32` length + UTF-8. See FORMATS.md for every body layout.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::bytes::{put_str, put_u32, ByteReader};
use crate::checksum::{Digest, DIGEST_LEN};
use crate::codec::Bitstream;
use crate::model::{Bitwidth, ManifestEntry, ModelManifest};

pub const WIRE_VERSION: u8 = 1;

/// Largest accepted `len` field.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

const TAG_MODEL_REQUEST: u8 = 0x01;
const TAG_MODEL_RESPONSE: u8 = 0x02;
const TAG_UPDATE_REQUEST: u8 = 0x03;
const TAG_UPDATE_RESPONSE: u8 = 0x04;
const TAG_LIST_MODELS: u8 = 0x05;
const TAG_MODEL_LIST: u8 = 0x06;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(u32),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("unsupported message version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
}

/// Reasons a server refuses a request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownModel = 1,
    UnsupportedBitwidth = 2,
    /// The client's base is not the server's current encoding; re-fetch it.
    ChecksumMismatch = 3,
    BadRequest = 4,
    Internal = 5,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::UnknownModel,
            2 => ErrorCode::UnsupportedBitwidth,
            3 => ErrorCode::ChecksumMismatch,
            4 => ErrorCode::BadRequest,
            5 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemoteError {
    pub code: ErrorCode,
    pub message: String,
}

/// A bitstream plus how long the server spent preparing it (quantize and
/// encode, or compute and encode the update) when it was first produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Served {
    pub bitstream: Bitstream,
    pub prepare_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    ModelRequest {
        model_id: String,
        /// Raw bit count so an unsupported value reaches the server and gets
        /// a proper error reply.
        bitwidth: u8,
    },
    ModelResponse(Result<Served, RemoteError>),
    UpdateRequest {
        model_id: String,
        base_bitwidth: u8,
        base_checksum: Digest,
        /// Largest acceptable `‖W' - W^h‖∞`; the server picks the update
        /// bitwidth from it. `None` asks for a 32-bit update.
        tolerance: Option<f64>,
    },
    UpdateResponse(Result<Served, RemoteError>),
    ListModels,
    ModelList(Vec<ModelManifest>),
}

fn put_served(out: &mut Vec<u8>, r: &Result<Served, RemoteError>) {
    match r {
        Ok(s) => {
            out.push(0);
            out.extend_from_slice(&s.prepare_s.to_le_bytes());
            out.extend_from_slice(&(s.bitstream.len() as u64).to_le_bytes());
            out.extend_from_slice(s.bitstream.as_bytes());
        }
        Err(e) => {
            out.push(1);
            out.push(e.code as u8);
            put_str(out, &e.message);
        }
    }
}

impl Message {
    fn tag(&self) -> u8 {
        match self {
            Message::ModelRequest { .. } => TAG_MODEL_REQUEST,
            Message::ModelResponse(_) => TAG_MODEL_RESPONSE,
            Message::UpdateRequest { .. } => TAG_UPDATE_REQUEST,
            Message::UpdateResponse(_) => TAG_UPDATE_RESPONSE,
            Message::ListModels => TAG_LIST_MODELS,
            Message::ModelList(_) => TAG_MODEL_LIST,
        }
    }

    /// The complete frame, length prefix included.
    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = vec![0, 0, 0, 0, self.tag(), WIRE_VERSION];
        match self {
            Message::ModelRequest { model_id, bitwidth } => {
                put_str(&mut out, model_id);
                out.push(*bitwidth);
            }
            Message::ModelResponse(r) | Message::UpdateResponse(r) => put_served(&mut out, r),
            Message::UpdateRequest {
                model_id,
                base_bitwidth,
                base_checksum,
                tolerance,
            } => {
                put_str(&mut out, model_id);
                out.push(*base_bitwidth);
                out.extend_from_slice(base_checksum.as_bytes());
                match tolerance {
                    None => out.push(0),
                    Some(t) => {
                        out.push(1);
                        out.extend_from_slice(&t.to_le_bytes());
                    }
                }
            }
            Message::ListModels => {}
            Message::ModelList(manifests) => {
                put_u32(&mut out, manifests.len() as u32);
                for m in manifests {
                    put_str(&mut out, m.model_id());
                    put_u32(&mut out, m.entries().len() as u32);
                    for e in m.entries() {
                        out.push(e.bitwidth.bits() as u8);
                        out.extend_from_slice(&e.encoded_size.to_le_bytes());
                        out.extend_from_slice(e.checksum.as_bytes());
                    }
                }
            }
        }
        let len = (out.len() - 4) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        out
    }

    /// Parses `tag | version | body` (a frame without its length prefix).
    pub fn from_body(frame: &[u8]) -> Result<Message, WireError> {
        use WireError::Malformed;
        let mut r = ByteReader::new(frame);
        let tag = r.u8().map_err(|_| Malformed("empty frame"))?;
        let version = r.u8().map_err(|_| Malformed("missing version"))?;
        if !(TAG_MODEL_REQUEST..=TAG_MODEL_LIST).contains(&tag) {
            return Err(WireError::UnknownTag(tag));
        }
        if version != WIRE_VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let msg = match tag {
            TAG_MODEL_REQUEST => Message::ModelRequest {
                model_id: read_str(&mut r)?,
                bitwidth: r.u8().map_err(|_| Malformed("bitwidth"))?,
            },
            TAG_MODEL_RESPONSE => Message::ModelResponse(read_served(&mut r)?),
            TAG_UPDATE_REQUEST => Message::UpdateRequest {
                model_id: read_str(&mut r)?,
                base_bitwidth: r.u8().map_err(|_| Malformed("base bitwidth"))?,
                base_checksum: Digest::from_bytes(r.array().map_err(|_| Malformed("base checksum"))?),
                tolerance: match r.u8().map_err(|_| Malformed("tolerance flag"))? {
                    0 => None,
                    1 => Some(r.f64().map_err(|_| Malformed("tolerance"))?),
                    _ => return Err(Malformed("tolerance flag")),
                },
            },
            TAG_UPDATE_RESPONSE => Message::UpdateResponse(read_served(&mut r)?),
            TAG_LIST_MODELS => Message::ListModels,
            _ => {
                let n = r.u32().map_err(|_| Malformed("manifest count"))?;
                let mut manifests = Vec::new();
                for _ in 0..n {
                    let id = read_str(&mut r)?;
                    let k = r.u32().map_err(|_| Malformed("entry count"))?;
                    let mut entries = Vec::new();
                    for _ in 0..k {
                        let bits = r.u8().map_err(|_| Malformed("entry bitwidth"))?;
                        entries.push(ManifestEntry {
                            bitwidth: Bitwidth::from_bits(bits as u32)
                                .map_err(|_| Malformed("entry bitwidth"))?,
                            encoded_size: r.u64().map_err(|_| Malformed("entry size"))?,
                            checksum: Digest::from_bytes(
                                r.array::<DIGEST_LEN>().map_err(|_| Malformed("entry checksum"))?,
                            ),
                        });
                    }
                    manifests.push(
                        ModelManifest::new(id, entries).map_err(|_| Malformed("duplicate entry"))?,
                    );
                }
                Message::ModelList(manifests)
            }
        };
        if r.remaining() != 0 {
            return Err(Malformed("trailing bytes"));
        }
        Ok(msg)
    }
}

fn read_str(r: &mut ByteReader<'_>) -> Result<String, WireError> {
    let len = r.u32().map_err(|_| WireError::Malformed("string length"))? as usize;
    let bytes = r.take(len).map_err(|_| WireError::Malformed("string"))?;
    String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("string is not UTF-8"))
}

fn read_served(r: &mut ByteReader<'_>) -> Result<Result<Served, RemoteError>, WireError> {
    use WireError::Malformed;
    match r.u8().map_err(|_| Malformed("status"))? {
        0 => {
            let prepare_s = r.f64().map_err(|_| Malformed("prepare time"))?;
            let len = r.u64().map_err(|_| Malformed("bitstream length"))?;
            let len = usize::try_from(len).map_err(|_| Malformed("bitstream length"))?;
            let bytes = r.take(len).map_err(|_| Malformed("bitstream"))?;
            Ok(Ok(Served {
                bitstream: Bitstream::from_bytes(bytes.to_vec()),
                prepare_s,
            }))
        }
        1 => {
            let code = r.u8().map_err(|_| Malformed("error code"))?;
            let code = ErrorCode::from_u8(code).ok_or(Malformed("error code"))?;
            Ok(Err(RemoteError {
                code,
                message: read_str(r)?,
            }))
        }
        _ => Err(Malformed("status")),
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    w.write_all(&msg.to_frame())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed the stream cleanly
/// before a new frame started.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Message::from_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(m: Message) {
        let frame = m.to_frame();
        let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        assert_eq!(read_message(&mut frame.as_slice()).unwrap(), Some(m));
    }

    #[test]
    fn every_message_roundtrips() {
        let sum = Digest::of(b"base");
        roundtrip(Message::ModelRequest {
            model_id: "m".into(),
            bitwidth: 8,
        });
        roundtrip(Message::ModelResponse(Ok(Served {
            bitstream: Bitstream::from_bytes(vec![1, 2, 3]),
            prepare_s: 0.25,
        })));
        roundtrip(Message::ModelResponse(Err(RemoteError {
            code: ErrorCode::UnknownModel,
            message: "no such model".into(),
        })));
        roundtrip(Message::UpdateRequest {
            model_id: "m".into(),
            base_bitwidth: 4,
            base_checksum: sum,
            tolerance: Some(1e-3),
        });
        roundtrip(Message::UpdateRequest {
            model_id: "m".into(),
            base_bitwidth: 4,
            base_checksum: sum,
            tolerance: None,
        });
        roundtrip(Message::UpdateResponse(Err(RemoteError {
            code: ErrorCode::ChecksumMismatch,
            message: String::new(),
        })));
        roundtrip(Message::ListModels);
        roundtrip(Message::ModelList(vec![ModelManifest::new(
            "m",
            vec![ManifestEntry {
                bitwidth: Bitwidth::B8,
                encoded_size: 99,
                checksum: sum,
            }],
        )
        .unwrap()]));
    }

    #[test]
    fn list_request_is_six_bytes() {
        assert_eq!(Message::ListModels.to_frame(), vec![2, 0, 0, 0, 0x05, 1]);
    }

    #[test]
    fn clean_close_vs_truncation() {
        assert!(read_message(&mut [].as_slice()).unwrap().is_none());
        assert!(read_message(&mut [5u8, 0].as_slice()).is_err());
        let frame = Message::ListModels.to_frame();
        assert!(read_message(&mut &frame[..5]).is_err());
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(matches!(
            Message::from_body(&[0x09, 1]),
            Err(WireError::UnknownTag(0x09))
        ));
        assert!(matches!(
            Message::from_body(&[0x05, 2]),
            Err(WireError::UnsupportedVersion(2))
        ));
        assert!(matches!(
            Message::from_body(&[0x05, 1, 0]),
            Err(WireError::Malformed(_))
        ));
        let huge = (MAX_FRAME_LEN + 1).to_le_bytes();
        assert!(matches!(
            read_message(&mut huge.as_slice()),
            Err(WireError::FrameTooLarge(_))
        ));
    }
}
