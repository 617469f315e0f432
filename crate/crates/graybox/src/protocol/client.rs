//! Remote vault client: speaks the wire protocol and implements the same
//! sealed interface as the in-process client, so training code runs
//! unchanged against either. Every frame in both directions is logged to an
//! append-only exposure ledger.

use std::io::{Read, Write};
use std::net::TcpStream;

use super::{decode_frame, encode_frame, error_code, Message, ProtocolError, MAX_FRAME_LEN};
use crate::tensor::Tensor;
use crate::vault::{
    ClientError, EntryBatch, EntryGrads, EntryPointDescriptor, ForwardOutputs, OutputTag,
    SessionId, VaultClient,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Sent => "sent",
            Direction::Received => "recv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sent" => Some(Direction::Sent),
            "recv" => Some(Direction::Received),
            _ => None,
        }
    }
}

/// One logged frame: direction, message type, tensor shapes, entry ids for
/// entry-bearing messages, and the exact frame byte count.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub direction: Direction,
    pub msg_type: u8,
    pub tensor_shapes: Vec<Vec<usize>>,
    pub entry_ids: Vec<u8>,
    pub frame_bytes: usize,
}

impl LedgerEntry {
    pub fn to_line(&self) -> String {
        let shapes = self
            .tensor_shapes
            .iter()
            .map(|dims| {
                dims.iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            })
            .collect::<Vec<_>>()
            .join("|");
        let entries = self
            .entry_ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{} {} bytes={} shapes={} entries={}",
            self.direction.label(),
            Message::<f32>::type_name(self.msg_type),
            self.frame_bytes,
            if shapes.is_empty() { "-" } else { &shapes },
            if entries.is_empty() { "-" } else { &entries },
        )
    }

    pub fn parse_line(line: &str) -> Option<LedgerEntry> {
        let mut parts = line.split_whitespace();
        let direction = Direction::parse(parts.next()?)?;
        let name = parts.next()?;
        let msg_type = (1u8..=255)
            .find(|&t| Message::<f32>::type_name(t) == name && name != "UNKNOWN")?;
        let bytes_part = parts.next()?.strip_prefix("bytes=")?;
        let frame_bytes = bytes_part.parse().ok()?;
        let shapes_part = parts.next()?.strip_prefix("shapes=")?;
        let tensor_shapes = if shapes_part == "-" {
            vec![]
        } else {
            shapes_part
                .split('|')
                .map(|s| s.split('x').map(|d| d.parse().unwrap_or(0)).collect())
                .collect()
        };
        let entries_part = parts.next()?.strip_prefix("entries=")?;
        let entry_ids = if entries_part == "-" {
            vec![]
        } else {
            entries_part
                .split(',')
                .map(|s| s.parse().unwrap_or(0))
                .collect()
        };
        Some(LedgerEntry {
            direction,
            msg_type,
            tensor_shapes,
            entry_ids,
            frame_bytes,
        })
    }
}

/// Append-only record of everything that crossed one connection.
#[derive(Debug, Default, Clone)]
pub struct ExposureLedger {
    pub entries: Vec<LedgerEntry>,
}

impl ExposureLedger {
    pub fn record<T: crate::tensor::Scalar>(
        &mut self,
        direction: Direction,
        msg: &Message<T>,
        frame_bytes: usize,
    ) {
        let (tensor_shapes, entry_ids) = msg.tensor_summary();
        self.entries.push(LedgerEntry {
            direction,
            msg_type: msg.msg_type(),
            tensor_shapes,
            entry_ids,
            frame_bytes,
        });
    }

    /// Exact byte total; replaying the ledger reconstructs the traffic.
    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.frame_bytes).sum()
    }

    pub fn bytes_by_type(&self) -> Vec<(u8, usize)> {
        let mut by_type: std::collections::BTreeMap<u8, usize> = Default::default();
        for e in &self.entries {
            *by_type.entry(e.msg_type).or_default() += e.frame_bytes;
        }
        by_type.into_iter().collect()
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse_lines(text: &str) -> ExposureLedger {
        ExposureLedger {
            entries: text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .filter_map(LedgerEntry::parse_line)
                .collect(),
        }
    }
}

/// Sealed client over a TCP connection.
pub struct RemoteClient {
    stream: TcpStream,
    ledger: ExposureLedger,
}

/// Connects to a serving vault, e.g. "127.0.0.1:4747".
pub fn connect(addr: &str) -> Result<RemoteClient, ClientError> {
    let stream =
        TcpStream::connect(addr).map_err(|e| ClientError::Transport(format!("connect: {e}")))?;
    stream
        .set_nodelay(true)
        .map_err(|e| ClientError::Transport(format!("nodelay: {e}")))?;
    Ok(RemoteClient {
        stream,
        ledger: ExposureLedger::default(),
    })
}

impl RemoteClient {
    pub fn ledger(&self) -> &ExposureLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> ExposureLedger {
        std::mem::take(&mut self.ledger)
    }

    fn transact(&mut self, msg: &Message<f32>) -> Result<Message<f32>, ClientError> {
        let frame = encode_frame(msg);
        self.ledger.record(Direction::Sent, msg, frame.len());
        self.stream
            .write_all(&frame)
            .map_err(|e| ClientError::Transport(format!("send: {e}")))?;

        let mut header = [0u8; 8];
        self.stream
            .read_exact(&mut header)
            .map_err(|e| ClientError::Transport(format!("recv header: {e}")))?;
        if &header[..4] != super::MAGIC {
            return Err(ClientError::Protocol("bad magic in response".into()));
        }
        let length = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if length == 0 || length > MAX_FRAME_LEN {
            return Err(ClientError::Protocol(format!(
                "response length {length} out of range"
            )));
        }
        let mut rest = vec![0u8; length as usize];
        self.stream
            .read_exact(&mut rest)
            .map_err(|e| ClientError::Transport(format!("recv body: {e}")))?;
        let mut full = header.to_vec();
        full.extend_from_slice(&rest);
        let (reply, used) = decode_frame::<f32>(&full).map_err(|e: ProtocolError| {
            ClientError::Protocol(format!("response decode: {e}"))
        })?;
        debug_assert_eq!(used, full.len());
        self.ledger.record(Direction::Received, &reply, full.len());
        Ok(reply)
    }
}

fn reject_error(reply: Message<f32>) -> ClientError {
    match reply {
        Message::Error { code, message } => match code {
            error_code::STALE_SESSION => {
                // Extract the id when present; zero otherwise.
                let id = message
                    .split_whitespace()
                    .rev()
                    .find_map(|w| w.parse().ok())
                    .unwrap_or(0);
                ClientError::StaleSession(id)
            }
            _ => ClientError::Protocol(format!("server error {code}: {message}")),
        },
        other => ClientError::Protocol(format!(
            "unexpected {} response",
            Message::<f32>::type_name(other.msg_type())
        )),
    }
}

impl VaultClient<f32> for RemoteClient {
    fn describe(&mut self) -> Result<Vec<EntryPointDescriptor>, ClientError> {
        match self.transact(&Message::DescribeReq)? {
            Message::DescribeRsp(descriptors) => Ok(descriptors),
            other => Err(reject_error(other)),
        }
    }

    fn embed_tokens(&mut self, ids: &[usize]) -> Result<Tensor<f32>, ClientError> {
        if ids.iter().any(|&i| i > u8::MAX as usize) {
            return Err(ClientError::Protocol("token id exceeds wire range".into()));
        }
        let msg = Message::EmbedReq {
            ids: ids.iter().map(|&i| i as u8).collect(),
        };
        match self.transact(&msg)? {
            Message::EmbedRsp(tensor) => Ok(tensor),
            other => Err(reject_error(other)),
        }
    }

    fn open_session(&mut self) -> Result<SessionId, ClientError> {
        match self.transact(&Message::SessionOpen)? {
            Message::SessionAck { session } => Ok(session),
            other => Err(reject_error(other)),
        }
    }

    fn forward(
        &mut self,
        session: SessionId,
        batch: &EntryBatch<f32>,
    ) -> Result<ForwardOutputs<f32>, ClientError> {
        let msg = Message::ForwardReq {
            session,
            entries: batch.entries.clone(),
        };
        match self.transact(&msg)? {
            Message::ForwardRsp { outputs } => {
                let mut features = Vec::with_capacity(outputs.len());
                for (code, tensor) in outputs {
                    let tag = OutputTag::from_code(code).ok_or_else(|| {
                        ClientError::Protocol(format!("unknown output tag {code}"))
                    })?;
                    features.push((tag, tensor));
                }
                Ok(ForwardOutputs { features })
            }
            other => Err(reject_error(other)),
        }
    }

    fn backward(
        &mut self,
        session: SessionId,
        out_grads: &[(OutputTag, Tensor<f32>)],
    ) -> Result<EntryGrads<f32>, ClientError> {
        let msg = Message::BackwardReq {
            session,
            grads: out_grads
                .iter()
                .map(|(tag, t)| (tag.code(), t.clone()))
                .collect(),
        };
        match self.transact(&msg)? {
            Message::BackwardRsp { grads } => Ok(grads),
            other => Err(reject_error(other)),
        }
    }

    fn close_session(&mut self, session: SessionId) -> Result<(), ClientError> {
        match self.transact(&Message::SessionClose { session })? {
            Message::SessionAck { .. } => Ok(()),
            other => Err(reject_error(other)),
        }
    }
}
