//! The vault server: accepts concurrent connections, keeps a per-connection
//! session table, and answers strictly within the sealed contract. Owner
//! mode is never reachable over the wire.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{
    encode_frame, error_code, Message, ProtocolError, MAGIC, MAX_FRAME_LEN,
};

use crate::vault::{
    ClientError, EntryBatch, InProcessClient, OutputTag, SessionId, VaultClient, VaultModel,
};

#[derive(Debug, Clone)]
pub struct ServeLimits {
    /// Frames longer than this are rejected before allocation.
    pub max_frame: u32,
    /// Sessions idle longer than this are expired; backward on an expired
    /// session reports the stale-session error.
    pub session_idle: Duration,
    /// Open sessions allowed per connection.
    pub max_sessions: usize,
}

impl Default for ServeLimits {
    fn default() -> Self {
        ServeLimits {
            max_frame: MAX_FRAME_LEN,
            session_idle: Duration::from_secs(300),
            max_sessions: 64,
        }
    }
}

/// Running server handle; shuts down (and joins its threads) on
/// [`Server::shutdown`] or drop.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop_now();
        }
    }
}

/// Binds `bind` (e.g. "127.0.0.1:0") and serves the vault until shutdown.
pub fn serve(
    vault: Arc<VaultModel<f32>>,
    bind: &str,
    limits: ServeLimits,
) -> std::io::Result<Server> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = Arc::clone(&stop);
    let accept_thread = std::thread::spawn(move || {
        let mut workers = Vec::new();
        for stream in listener.incoming() {
            if stop_accept.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let vault = Arc::clone(&vault);
            let limits = limits.clone();
            let stop = Arc::clone(&stop_accept);
            workers.push(std::thread::spawn(move || {
                // Per-connection faults stay on this connection.
                let _ = handle_connection(stream, vault, limits, stop);
            }));
        }
        for w in workers {
            let _ = w.join();
        }
    });
    Ok(Server {
        addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

fn read_exact_or_eof(stream: &mut TcpStream, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Reads one frame off the stream. `Ok(None)` is a clean EOF before a new
/// frame; header-level corruption is unrecoverable and closes the
/// connection.
fn read_frame(
    stream: &mut TcpStream,
    max_frame: u32,
) -> Result<Option<(u8, Vec<u8>)>, ProtocolError> {
    let mut header = [0u8; 8];
    if !read_exact_or_eof(stream, &mut header)? {
        return Ok(None);
    }
    if &header[..4] != MAGIC {
        return Err(ProtocolError::BadMagic { offset: 0 });
    }
    let length = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if length > max_frame {
        return Err(ProtocolError::Oversize {
            length: length as u64,
        });
    }
    if length == 0 {
        return Err(ProtocolError::Malformed {
            what: "frame",
            offset: 4,
            reason: "zero-length frame".into(),
        });
    }
    let mut body = vec![0u8; length as usize];
    if !read_exact_or_eof(stream, &mut body)? {
        return Err(ProtocolError::Truncated {
            offset: 8,
            needed: length as usize,
        });
    }
    let msg_type = body[0];
    Ok(Some((msg_type, body.split_off(1))))
}

struct SessionClock {
    last_touch: std::collections::HashMap<SessionId, Instant>,
}

fn handle_connection(
    mut stream: TcpStream,
    vault: Arc<VaultModel<f32>>,
    limits: ServeLimits,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut engine = InProcessClient::new(vault);
    let mut clock = SessionClock {
        last_touch: std::collections::HashMap::new(),
    };

    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let frame = match read_frame(&mut stream, limits.max_frame) {
            Ok(Some(frame)) => frame,
            Ok(None) => return Ok(()), // clean disconnect
            Err(ProtocolError::Io(e))
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue; // poll the stop flag, then keep reading
            }
            Err(ProtocolError::Io(e)) => return Err(e),
            Err(_) => return Ok(()), // header corruption: drop the connection
        };

        expire_idle(&mut engine, &mut clock, limits.session_idle);

        let (msg_type, payload) = frame;
        let reply = match super::decode_payload::<f32>(msg_type, &payload) {
            Err(ProtocolError::UnknownType(t)) => Message::Error {
                code: error_code::UNKNOWN_TYPE,
                message: format!("unknown message type {t}"),
            },
            Err(e) => Message::Error {
                code: error_code::MALFORMED,
                message: e.to_string(),
            },
            Ok(msg) => respond(&mut engine, &mut clock, &limits, msg),
        };
        stream.write_all(&encode_frame(&reply))?;
    }
}

fn expire_idle(engine: &mut InProcessClient<f32>, clock: &mut SessionClock, idle: Duration) {
    let now = Instant::now();
    let expired: Vec<SessionId> = clock
        .last_touch
        .iter()
        .filter(|(_, &t)| now.duration_since(t) > idle)
        .map(|(&s, _)| s)
        .collect();
    for s in expired {
        engine.expire_session(s);
        clock.last_touch.remove(&s);
    }
}

fn client_error_reply(err: ClientError) -> Message<f32> {
    let (code, message) = match &err {
        ClientError::StaleSession(s) => (error_code::STALE_SESSION, format!("stale session {s}")),
        ClientError::SessionState { .. } => (error_code::BAD_STATE, err.to_string()),
        ClientError::Vault(v) => (error_code::BAD_ENTRY, v.to_string()),
        ClientError::Transport(m) | ClientError::Protocol(m) => {
            (error_code::INTERNAL, m.clone())
        }
    };
    Message::Error { code, message }
}

fn respond(
    engine: &mut InProcessClient<f32>,
    clock: &mut SessionClock,
    limits: &ServeLimits,
    msg: Message<f32>,
) -> Message<f32> {
    match msg {
        Message::DescribeReq => Message::DescribeRsp(engine.describe().expect("in-process")),
        Message::EmbedReq { ids } => {
            let ids: Vec<usize> = ids.iter().map(|&b| b as usize).collect();
            match engine.embed_tokens(&ids) {
                Ok(tensor) => Message::EmbedRsp(tensor),
                Err(e) => client_error_reply(e),
            }
        }
        Message::SessionOpen => {
            if engine.open_session_count() >= limits.max_sessions {
                return Message::Error {
                    code: error_code::LIMIT,
                    message: format!("session limit {} reached", limits.max_sessions),
                };
            }
            let session = engine.open_session().expect("in-process");
            clock.last_touch.insert(session, Instant::now());
            Message::SessionAck { session }
        }
        Message::ForwardReq { session, entries } => {
            if !clock.last_touch.contains_key(&session) {
                return client_error_reply(ClientError::StaleSession(session));
            }
            clock.last_touch.insert(session, Instant::now());
            let batch = EntryBatch { entries };
            match engine.forward(session, &batch) {
                Ok(outputs) => Message::ForwardRsp {
                    outputs: outputs
                        .features
                        .into_iter()
                        .map(|(tag, t)| (tag.code(), t))
                        .collect(),
                },
                Err(e) => client_error_reply(e),
            }
        }
        Message::BackwardReq { session, grads } => {
            if !clock.last_touch.contains_key(&session) {
                return client_error_reply(ClientError::StaleSession(session));
            }
            clock.last_touch.insert(session, Instant::now());
            let mut out_grads = Vec::with_capacity(grads.len());
            for (code, tensor) in grads {
                match OutputTag::from_code(code) {
                    Some(tag) => out_grads.push((tag, tensor)),
                    None => {
                        return Message::Error {
                            code: error_code::BAD_ENTRY,
                            message: format!("unknown output tag {code}"),
                        }
                    }
                }
            }
            match engine.backward(session, &out_grads) {
                Ok(entry_grads) => Message::BackwardRsp { grads: entry_grads },
                Err(e) => client_error_reply(e),
            }
        }
        Message::SessionClose { session } => {
            clock.last_touch.remove(&session);
            match engine.close_session(session) {
                Ok(()) => Message::SessionAck { session },
                Err(e) => client_error_reply(e),
            }
        }
        // Server-to-client shapes arriving at the server are contract
        // violations but harmless; answer with a protocol error.
        other => Message::Error {
            code: error_code::MALFORMED,
            message: format!(
                "{} is not a client request",
                Message::<f32>::type_name(other.msg_type())
            ),
        },
    }
}

