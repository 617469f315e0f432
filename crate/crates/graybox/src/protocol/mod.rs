//! Binary wire protocol for the split vault.
//!
//! Frames are `"GBX1"` + u32 little-endian length + u8 message type +
//! payload, where the length counts the type byte plus the payload. The
//! message set carries descriptors, token ids, activations, and gradients;
//! there is no message whose payload is sourced from vault parameters, so
//! weight exfiltration is unrepresentable rather than merely forbidden
//! (the one nuance: embedding rows of explicitly requested token ids cross
//! on EMBED_RSP, and the exposure ledger logs them).
//!
//! All tensors use the tensor binary encoding. The wire runs f32 in
//! practice; the dtype tag keeps f64 available for debugging builds.

mod audit;
mod client;
mod server;

pub use audit::{audit_ledger, AuditError, ExposureReport, ExposureRow};
pub use client::{connect, Direction, ExposureLedger, LedgerEntry, RemoteClient};
pub use server::{serve, ServeLimits, Server};

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};
use crate::vault::{Encoder, EntryPointDescriptor, Modality};

pub const MAGIC: &[u8; 4] = b"GBX1";
/// Sanity cap on the frame length field.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

pub const MSG_DESCRIBE_REQ: u8 = 1;
pub const MSG_DESCRIBE_RSP: u8 = 2;
pub const MSG_EMBED_REQ: u8 = 3;
pub const MSG_EMBED_RSP: u8 = 4;
pub const MSG_SESSION_OPEN: u8 = 5;
pub const MSG_SESSION_ACK: u8 = 6;
pub const MSG_FORWARD_REQ: u8 = 7;
pub const MSG_FORWARD_RSP: u8 = 8;
pub const MSG_BACKWARD_REQ: u8 = 9;
pub const MSG_BACKWARD_RSP: u8 = 10;
pub const MSG_SESSION_CLOSE: u8 = 11;
pub const MSG_ERROR: u8 = 255;

/// Fixed error-code table carried by ERROR frames.
pub mod error_code {
    /// Payload of a known message type failed to parse.
    pub const MALFORMED: u16 = 1;
    /// Well-framed message of an unknown type; the connection survives.
    pub const UNKNOWN_TYPE: u16 = 2;
    /// Unknown or expired session id.
    pub const STALE_SESSION: u16 = 3;
    /// Session exists but is in the wrong state for the request.
    pub const BAD_STATE: u16 = 4;
    /// Entry/shape/input contract violation.
    pub const BAD_ENTRY: u16 = 5;
    /// A configured limit was exceeded.
    pub const LIMIT: u16 = 6;
    /// Server-side failure.
    pub const INTERNAL: u16 = 7;
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("truncated frame at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("frame length {length} exceeds the {MAX_FRAME_LEN}-byte cap")]
    Oversize { length: u64 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed {what} payload at byte {offset}: {reason}")]
    Malformed {
        what: &'static str,
        offset: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message<T: Scalar> {
    DescribeReq,
    DescribeRsp(Vec<EntryPointDescriptor>),
    EmbedReq { ids: Vec<u8> },
    EmbedRsp(Tensor<T>),
    SessionOpen,
    SessionAck { session: u64 },
    ForwardReq {
        session: u64,
        entries: Vec<(u8, Tensor<T>)>,
    },
    ForwardRsp {
        outputs: Vec<(u8, Tensor<T>)>,
    },
    BackwardReq {
        session: u64,
        grads: Vec<(u8, Tensor<T>)>,
    },
    BackwardRsp {
        grads: Vec<(u8, Tensor<T>)>,
    },
    SessionClose { session: u64 },
    Error { code: u16, message: String },
}

impl<T: Scalar> Message<T> {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::DescribeReq => MSG_DESCRIBE_REQ,
            Message::DescribeRsp(_) => MSG_DESCRIBE_RSP,
            Message::EmbedReq { .. } => MSG_EMBED_REQ,
            Message::EmbedRsp(_) => MSG_EMBED_RSP,
            Message::SessionOpen => MSG_SESSION_OPEN,
            Message::SessionAck { .. } => MSG_SESSION_ACK,
            Message::ForwardReq { .. } => MSG_FORWARD_REQ,
            Message::ForwardRsp { .. } => MSG_FORWARD_RSP,
            Message::BackwardReq { .. } => MSG_BACKWARD_REQ,
            Message::BackwardRsp { .. } => MSG_BACKWARD_RSP,
            Message::SessionClose { .. } => MSG_SESSION_CLOSE,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    pub fn type_name(msg_type: u8) -> &'static str {
        match msg_type {
            MSG_DESCRIBE_REQ => "DESCRIBE_REQ",
            MSG_DESCRIBE_RSP => "DESCRIBE_RSP",
            MSG_EMBED_REQ => "EMBED_REQ",
            MSG_EMBED_RSP => "EMBED_RSP",
            MSG_SESSION_OPEN => "SESSION_OPEN",
            MSG_SESSION_ACK => "SESSION_ACK",
            MSG_FORWARD_REQ => "FORWARD_REQ",
            MSG_FORWARD_RSP => "FORWARD_RSP",
            MSG_BACKWARD_REQ => "BACKWARD_REQ",
            MSG_BACKWARD_RSP => "BACKWARD_RSP",
            MSG_SESSION_CLOSE => "SESSION_CLOSE",
            MSG_ERROR => "ERROR",
            _ => "UNKNOWN",
        }
    }

    /// Shapes of every tensor this message carries, and (for entry-bearing
    /// messages) the entry ids, for the exposure ledger.
    pub fn tensor_summary(&self) -> (Vec<Vec<usize>>, Vec<u8>) {
        match self {
            Message::EmbedRsp(t) => (vec![t.dims().to_vec()], vec![]),
            Message::ForwardReq { entries, .. } | Message::BackwardRsp { grads: entries } => (
                entries.iter().map(|(_, t)| t.dims().to_vec()).collect(),
                entries.iter().map(|(id, _)| *id).collect(),
            ),
            Message::ForwardRsp { outputs } => (
                outputs.iter().map(|(_, t)| t.dims().to_vec()).collect(),
                vec![],
            ),
            Message::BackwardReq { grads, .. } => (
                grads.iter().map(|(_, t)| t.dims().to_vec()).collect(),
                vec![],
            ),
            _ => (vec![], vec![]),
        }
    }
}

fn encode_descriptor(out: &mut Vec<u8>, d: &EntryPointDescriptor) {
    out.push(d.id);
    out.push(d.name.len() as u8);
    out.extend_from_slice(d.name.as_bytes());
    match &d.modality {
        Modality::VisionPixels => out.push(0),
        Modality::TextTokenIds => out.push(1),
        Modality::TextEmbeddings => out.push(2),
        Modality::LayerPrefix { encoder, layer } => {
            out.push(3);
            out.push(match encoder {
                Encoder::Vision => 0,
                Encoder::Text => 1,
            });
            out.push(*layer as u8);
        }
    }
    out.push(d.shape.len() as u8);
    for &dim in &d.shape {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(d.grad_available as u8);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Cursor {
            bytes,
            off: 0,
            what,
        }
    }

    fn fail(&self, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Malformed {
            what: self.what,
            offset: self.off,
            reason: reason.into(),
        }
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        if self.off >= self.bytes.len() {
            return Err(self.fail("unexpected end"));
        }
        let v = self.bytes[self.off];
        self.off += 1;
        Ok(v)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        if self.off + 2 > self.bytes.len() {
            return Err(self.fail("unexpected end"));
        }
        let v = u16::from_le_bytes([self.bytes[self.off], self.bytes[self.off + 1]]);
        self.off += 2;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        if self.off + 4 > self.bytes.len() {
            return Err(self.fail("unexpected end"));
        }
        let v = u32::from_le_bytes(self.bytes[self.off..self.off + 4].try_into().unwrap());
        self.off += 4;
        Ok(v)
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        if self.off + 8 > self.bytes.len() {
            return Err(self.fail("unexpected end"));
        }
        let v = u64::from_le_bytes(self.bytes[self.off..self.off + 8].try_into().unwrap());
        self.off += 8;
        Ok(v)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.off + n > self.bytes.len() {
            return Err(self.fail(format!("need {n} bytes")));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>, ProtocolError> {
        let (t, used) =
            Tensor::<T>::decode(&self.bytes[self.off..]).map_err(|e| self.fail(e.to_string()))?;
        self.off += used;
        Ok(t)
    }

    fn done(&self) -> Result<(), ProtocolError> {
        if self.off != self.bytes.len() {
            return Err(ProtocolError::Malformed {
                what: self.what,
                offset: self.off,
                reason: format!("{} trailing bytes", self.bytes.len() - self.off),
            });
        }
        Ok(())
    }
}

/// Serializes a message into one complete frame.
pub fn encode_frame<T: Scalar>(msg: &Message<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::DescribeReq | Message::SessionOpen => {}
        Message::DescribeRsp(descriptors) => {
            payload.push(descriptors.len() as u8);
            for d in descriptors {
                encode_descriptor(&mut payload, d);
            }
        }
        Message::EmbedReq { ids } => {
            payload.push(ids.len() as u8);
            payload.extend_from_slice(ids);
        }
        Message::EmbedRsp(tensor) => payload.extend_from_slice(&tensor.encode()),
        Message::SessionAck { session } | Message::SessionClose { session } => {
            payload.extend_from_slice(&session.to_le_bytes());
        }
        Message::ForwardReq { session, entries } => {
            payload.extend_from_slice(&session.to_le_bytes());
            payload.push(entries.len() as u8);
            for (id, tensor) in entries {
                payload.push(*id);
                payload.extend_from_slice(&tensor.encode());
            }
        }
        Message::ForwardRsp { outputs } => {
            payload.push(outputs.len() as u8);
            for (tag, tensor) in outputs {
                payload.push(*tag);
                payload.extend_from_slice(&tensor.encode());
            }
        }
        Message::BackwardReq { session, grads } => {
            payload.extend_from_slice(&session.to_le_bytes());
            payload.push(grads.len() as u8);
            for (tag, tensor) in grads {
                payload.push(*tag);
                payload.extend_from_slice(&tensor.encode());
            }
        }
        Message::BackwardRsp { grads } => {
            payload.push(grads.len() as u8);
            for (id, tensor) in grads {
                payload.push(*id);
                payload.extend_from_slice(&tensor.encode());
            }
        }
        Message::Error { code, message } => {
            payload.extend_from_slice(&code.to_le_bytes());
            payload.extend_from_slice(message.as_bytes());
        }
    }
    let mut out = Vec::with_capacity(9 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(1 + payload.len() as u32).to_le_bytes());
    out.push(msg.msg_type());
    out.extend_from_slice(&payload);
    out
}

/// Parses one complete frame from the front of `bytes`, returning the
/// message and the bytes consumed.
pub fn decode_frame<T: Scalar>(bytes: &[u8]) -> Result<(Message<T>, usize), ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated {
            offset: bytes.len(),
            needed: 4 - bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        let offset = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(ProtocolError::BadMagic { offset });
    }
    if bytes.len() < 8 {
        return Err(ProtocolError::Truncated {
            offset: bytes.len(),
            needed: 8 - bytes.len(),
        });
    }
    let length = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if length > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize {
            length: length as u64,
        });
    }
    if length == 0 {
        return Err(ProtocolError::Malformed {
            what: "frame",
            offset: 4,
            reason: "zero length cannot hold a message type".into(),
        });
    }
    let total = 8 + length as usize;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            offset: bytes.len(),
            needed: total - bytes.len(),
        });
    }
    let msg_type = bytes[8];
    let payload = &bytes[9..total];
    let msg = decode_payload(msg_type, payload)?;
    Ok((msg, total))
}

pub(super) fn decode_payload<T: Scalar>(msg_type: u8, payload: &[u8]) -> Result<Message<T>, ProtocolError> {
    match msg_type {
        MSG_DESCRIBE_REQ => {
            Cursor::new(payload, "DESCRIBE_REQ").done()?;
            Ok(Message::DescribeReq)
        }
        MSG_SESSION_OPEN => {
            Cursor::new(payload, "SESSION_OPEN").done()?;
            Ok(Message::SessionOpen)
        }
        MSG_DESCRIBE_RSP => {
            let mut c = Cursor::new(payload, "DESCRIBE_RSP");
            let count = c.u8()? as usize;
            let mut descriptors = Vec::with_capacity(count);
            for _ in 0..count {
                let id = c.u8()?;
                let name_len = c.u8()? as usize;
                let name = std::str::from_utf8(c.take(name_len)?)
                    .map_err(|_| c.fail("descriptor name is not utf-8"))?
                    .to_string();
                let modality = match c.u8()? {
                    0 => Modality::VisionPixels,
                    1 => Modality::TextTokenIds,
                    2 => Modality::TextEmbeddings,
                    3 => {
                        let encoder = match c.u8()? {
                            0 => Encoder::Vision,
                            1 => Encoder::Text,
                            other => return Err(c.fail(format!("bad encoder byte {other}"))),
                        };
                        let layer = c.u8()? as usize;
                        Modality::LayerPrefix { encoder, layer }
                    }
                    other => return Err(c.fail(format!("bad modality tag {other}"))),
                };
                let rank = c.u8()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(c.u32()? as usize);
                }
                let grad_available = c.u8()? != 0;
                descriptors.push(EntryPointDescriptor {
                    id,
                    name,
                    modality,
                    shape,
                    grad_available,
                });
            }
            c.done()?;
            Ok(Message::DescribeRsp(descriptors))
        }
        MSG_EMBED_REQ => {
            let mut c = Cursor::new(payload, "EMBED_REQ");
            let count = c.u8()? as usize;
            let ids = c.take(count)?.to_vec();
            c.done()?;
            Ok(Message::EmbedReq { ids })
        }
        MSG_EMBED_RSP => {
            let mut c = Cursor::new(payload, "EMBED_RSP");
            let tensor = c.tensor()?;
            c.done()?;
            Ok(Message::EmbedRsp(tensor))
        }
        MSG_SESSION_ACK => {
            let mut c = Cursor::new(payload, "SESSION_ACK");
            let session = c.u64()?;
            c.done()?;
            Ok(Message::SessionAck { session })
        }
        MSG_SESSION_CLOSE => {
            let mut c = Cursor::new(payload, "SESSION_CLOSE");
            let session = c.u64()?;
            c.done()?;
            Ok(Message::SessionClose { session })
        }
        MSG_FORWARD_REQ => {
            let mut c = Cursor::new(payload, "FORWARD_REQ");
            let session = c.u64()?;
            let n = c.u8()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let id = c.u8()?;
                entries.push((id, c.tensor()?));
            }
            c.done()?;
            Ok(Message::ForwardReq { session, entries })
        }
        MSG_FORWARD_RSP => {
            let mut c = Cursor::new(payload, "FORWARD_RSP");
            let n = c.u8()? as usize;
            let mut outputs = Vec::with_capacity(n);
            for _ in 0..n {
                let tag = c.u8()?;
                outputs.push((tag, c.tensor()?));
            }
            c.done()?;
            Ok(Message::ForwardRsp { outputs })
        }
        MSG_BACKWARD_REQ => {
            let mut c = Cursor::new(payload, "BACKWARD_REQ");
            let session = c.u64()?;
            let n = c.u8()? as usize;
            let mut grads = Vec::with_capacity(n);
            for _ in 0..n {
                let tag = c.u8()?;
                grads.push((tag, c.tensor()?));
            }
            c.done()?;
            Ok(Message::BackwardReq { session, grads })
        }
        MSG_BACKWARD_RSP => {
            let mut c = Cursor::new(payload, "BACKWARD_RSP");
            let n = c.u8()? as usize;
            let mut grads = Vec::with_capacity(n);
            for _ in 0..n {
                let id = c.u8()?;
                grads.push((id, c.tensor()?));
            }
            c.done()?;
            Ok(Message::BackwardRsp { grads })
        }
        MSG_ERROR => {
            let mut c = Cursor::new(payload, "ERROR");
            let code = c.u16()?;
            let rest = c.take(payload.len() - 2)?;
            let message = String::from_utf8_lossy(rest).into_owned();
            Ok(Message::Error { code, message })
        }
        other => Err(ProtocolError::UnknownType(other)),
    }
}

// ---- schema table ----

/// Static description of every message in the protocol, the basis of the
/// weight-opacity audit: the schema set is total and no entry sources its
/// payload from vault parameters.
#[derive(Debug, Clone, Copy)]
pub struct MessageSchema {
    pub msg_type: u8,
    pub name: &'static str,
    pub direction: &'static str,
    /// What tensor payloads the message can carry.
    pub tensors: &'static str,
    /// Whether any field is sourced from vault parameters.
    pub carries_parameters: bool,
    /// Deliberate, logged exposures that are not parameters-in-bulk.
    pub exposure_note: Option<&'static str>,
}

pub fn message_schemas() -> &'static [MessageSchema] {
    &[
        MessageSchema {
            msg_type: MSG_DESCRIBE_REQ,
            name: "DESCRIBE_REQ",
            direction: "client->server",
            tensors: "none",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_DESCRIBE_RSP,
            name: "DESCRIBE_RSP",
            direction: "server->client",
            tensors: "none (descriptor shapes only)",
            carries_parameters: false,
            exposure_note: Some("entry-point dimensionality"),
        },
        MessageSchema {
            msg_type: MSG_EMBED_REQ,
            name: "EMBED_REQ",
            direction: "client->server",
            tensors: "none (token ids)",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_EMBED_RSP,
            name: "EMBED_RSP",
            direction: "server->client",
            tensors: "embedding rows of the requested ids",
            carries_parameters: false,
            exposure_note: Some("embedding rows of requested ids (logged)"),
        },
        MessageSchema {
            msg_type: MSG_SESSION_OPEN,
            name: "SESSION_OPEN",
            direction: "client->server",
            tensors: "none",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_SESSION_ACK,
            name: "SESSION_ACK",
            direction: "server->client",
            tensors: "none",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_FORWARD_REQ,
            name: "FORWARD_REQ",
            direction: "client->server",
            tensors: "client-supplied entry tensors",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_FORWARD_RSP,
            name: "FORWARD_RSP",
            direction: "server->client",
            tensors: "output feature activations",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_BACKWARD_REQ,
            name: "BACKWARD_REQ",
            direction: "client->server",
            tensors: "output-feature gradients",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_BACKWARD_RSP,
            name: "BACKWARD_RSP",
            direction: "server->client",
            tensors: "entry gradients",
            carries_parameters: false,
            exposure_note: Some("gradient flow at supplied entries"),
        },
        MessageSchema {
            msg_type: MSG_SESSION_CLOSE,
            name: "SESSION_CLOSE",
            direction: "client->server",
            tensors: "none",
            carries_parameters: false,
            exposure_note: None,
        },
        MessageSchema {
            msg_type: MSG_ERROR,
            name: "ERROR",
            direction: "server->client",
            tensors: "none",
            carries_parameters: false,
            exposure_note: None,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vault::build_vault;

    #[test]
    fn describe_req_is_the_documented_nine_bytes() {
        let frame = encode_frame(&Message::<f32>::DescribeReq);
        assert_eq!(
            frame,
            vec![0x47, 0x42, 0x58, 0x31, 0x01, 0x00, 0x00, 0x00, 0x01]
        );
        assert_eq!(frame.len(), 9);
    }

    #[test]
    fn frames_round_trip_bit_exactly() {
        let vault = build_vault::<f32>(3);
        let msgs: Vec<Message<f32>> = vec![
            Message::DescribeReq,
            Message::DescribeRsp(vault.list_entries()),
            Message::EmbedReq { ids: vec![1, 2, 3] },
            Message::EmbedRsp(vault.embed_tokens(&[1, 2, 3]).unwrap()),
            Message::SessionOpen,
            Message::SessionAck { session: 42 },
            Message::ForwardReq {
                session: 42,
                entries: vec![
                    (0, Tensor::filled(&[1, 3, 32, 32], 0.5f32)),
                    (2, Tensor::filled(&[1, 3, 64], -0.25f32)),
                ],
            },
            Message::ForwardRsp {
                outputs: vec![(0, Tensor::filled(&[1, 64], 1.5f32))],
            },
            Message::BackwardReq {
                session: 42,
                grads: vec![(0, Tensor::filled(&[1, 64], 2.0f32))],
            },
            Message::BackwardRsp {
                grads: vec![(0, Tensor::filled(&[1, 3, 32, 32], 0.1f32))],
            },
            Message::SessionClose { session: 42 },
            Message::Error {
                code: error_code::STALE_SESSION,
                message: "session 42 expired".into(),
            },
        ];
        for msg in msgs {
            let frame = encode_frame(&msg);
            let (back, used) = decode_frame::<f32>(&frame).unwrap();
            assert_eq!(used, frame.len());
            assert_eq!(back, msg);
            // encode(decode(frame)) == frame: the encoding is canonical.
            assert_eq!(encode_frame(&back), frame);
        }
    }

    #[test]
    fn truncation_and_corruption_are_structured_errors() {
        let frame = encode_frame(&Message::<f32>::SessionAck { session: 7 });
        for cut in 0..frame.len() {
            match decode_frame::<f32>(&frame[..cut]) {
                Err(_) => {}
                Ok(_) => panic!("decode succeeded on a {cut}-byte prefix"),
            }
        }
        let mut bad_magic = frame.clone();
        bad_magic[1] = b'!';
        assert!(matches!(
            decode_frame::<f32>(&bad_magic),
            Err(ProtocolError::BadMagic { offset: 1 })
        ));

        let mut oversize = frame.clone();
        oversize[4..8].copy_from_slice(&(MAX_FRAME_LEN + 1).to_le_bytes());
        assert!(matches!(
            decode_frame::<f32>(&oversize),
            Err(ProtocolError::Oversize { .. })
        ));

        let mut unknown = frame;
        unknown[8] = 99;
        assert!(matches!(
            decode_frame::<f32>(&unknown),
            Err(ProtocolError::UnknownType(99))
        ));
    }

    #[test]
    fn schema_table_is_total_and_parameter_free() {
        let schemas = message_schemas();
        assert_eq!(schemas.len(), 12);
        let types: Vec<u8> = schemas.iter().map(|s| s.msg_type).collect();
        for t in [
            MSG_DESCRIBE_REQ,
            MSG_DESCRIBE_RSP,
            MSG_EMBED_REQ,
            MSG_EMBED_RSP,
            MSG_SESSION_OPEN,
            MSG_SESSION_ACK,
            MSG_FORWARD_REQ,
            MSG_FORWARD_RSP,
            MSG_BACKWARD_REQ,
            MSG_BACKWARD_RSP,
            MSG_SESSION_CLOSE,
            MSG_ERROR,
        ] {
            assert!(types.contains(&t));
        }
        for s in schemas {
            assert!(!s.carries_parameters, "{} must not carry parameters", s.name);
        }
    }
}
