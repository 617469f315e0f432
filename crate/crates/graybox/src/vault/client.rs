//! The sealed client surface.
//!
//! [`VaultClient`] is everything a gray-box consumer can do, whether the
//! vault is in-process or behind the wire protocol. Its return types are
//! the whole exposure story: descriptors, embeddings of requested ids,
//! session ids, output features, and entry gradients. No method returns a
//! parameter tensor; [`SEALED_SURFACE`] pins that as an auditable table.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::forward::{EntryBatch, EntryGrads, ForwardOutputs, ForwardPass, Mode, OutputTag};
use super::{EntryPointDescriptor, VaultError, VaultModel};
use crate::tensor::{Scalar, Tensor};

pub type SessionId = u64;

/// The sealed operations and what each returns. The exposure audit asserts
/// this table stays free of parameter-returning operations.
pub const SEALED_SURFACE: &[(&str, &str)] = &[
    ("describe", "entry-point descriptors"),
    ("embed_tokens", "embedding rows of requested ids"),
    ("open_session", "session id"),
    ("forward", "output features"),
    ("backward", "entry gradients"),
    ("close_session", "unit"),
];

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error("unknown or expired session {0}")]
    StaleSession(SessionId),
    #[error("session {session} is {actual}; operation requires {needed}")]
    SessionState {
        session: SessionId,
        needed: &'static str,
        actual: &'static str,
    },
    /// Connection-level fault; safe to retry against a live server.
    #[error("transport: {0}")]
    Transport(String),
    /// Contract violation reported by the peer; retrying will not help.
    #[error("protocol: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}

/// Client view of the gray-box contract.
pub trait VaultClient<T: Scalar> {
    fn describe(&mut self) -> Result<Vec<EntryPointDescriptor>, ClientError>;
    fn embed_tokens(&mut self, ids: &[usize]) -> Result<Tensor<T>, ClientError>;
    fn open_session(&mut self) -> Result<SessionId, ClientError>;
    fn forward(
        &mut self,
        session: SessionId,
        batch: &EntryBatch<T>,
    ) -> Result<ForwardOutputs<T>, ClientError>;
    /// Exactly one backward per forward; consumes and closes the session.
    fn backward(
        &mut self,
        session: SessionId,
        out_grads: &[(OutputTag, Tensor<T>)],
    ) -> Result<EntryGrads<T>, ClientError>;
    fn close_session(&mut self, session: SessionId) -> Result<(), ClientError>;
}

enum Slot<T: Scalar> {
    Open,
    Forwarded(Box<ForwardPass<T>>),
    Closed,
}

impl<T: Scalar> Slot<T> {
    fn state_name(&self) -> &'static str {
        match self {
            Slot::Open => "open",
            Slot::Forwarded(_) => "forwarded",
            Slot::Closed => "closed",
        }
    }
}

/// Sealed access to a vault in the same process. Also the server-side
/// session engine behind the wire protocol.
pub struct InProcessClient<T: Scalar> {
    vault: Arc<VaultModel<T>>,
    sessions: HashMap<SessionId, Slot<T>>,
    next_session: SessionId,
}

impl<T: Scalar> InProcessClient<T> {
    pub fn new(vault: Arc<VaultModel<T>>) -> Self {
        InProcessClient {
            vault,
            sessions: HashMap::new(),
            next_session: 1,
        }
    }

    pub fn vault(&self) -> &VaultModel<T> {
        &self.vault
    }

    /// Drops a session outright (server-side expiry).
    pub fn expire_session(&mut self, session: SessionId) {
        self.sessions.remove(&session);
    }

    pub fn open_session_count(&self) -> usize {
        self.sessions
            .values()
            .filter(|s| !matches!(s, Slot::Closed))
            .count()
    }
}

impl<T: Scalar> VaultClient<T> for InProcessClient<T> {
    fn describe(&mut self) -> Result<Vec<EntryPointDescriptor>, ClientError> {
        Ok(self.vault.list_entries())
    }

    fn embed_tokens(&mut self, ids: &[usize]) -> Result<Tensor<T>, ClientError> {
        Ok(self.vault.embed_tokens(ids)?)
    }

    fn open_session(&mut self) -> Result<SessionId, ClientError> {
        let id = self.next_session;
        self.next_session += 1;
        self.sessions.insert(id, Slot::Open);
        Ok(id)
    }

    fn forward(
        &mut self,
        session: SessionId,
        batch: &EntryBatch<T>,
    ) -> Result<ForwardOutputs<T>, ClientError> {
        let slot = self
            .sessions
            .get_mut(&session)
            .ok_or(ClientError::StaleSession(session))?;
        if !matches!(slot, Slot::Open) {
            return Err(ClientError::SessionState {
                session,
                needed: "open",
                actual: slot.state_name(),
            });
        }
        let pass = self.vault.forward(batch, &Mode::Sealed)?;
        let outputs = pass.outputs().clone();
        *slot = Slot::Forwarded(Box::new(pass));
        Ok(outputs)
    }

    fn backward(
        &mut self,
        session: SessionId,
        out_grads: &[(OutputTag, Tensor<T>)],
    ) -> Result<EntryGrads<T>, ClientError> {
        let slot = self
            .sessions
            .get_mut(&session)
            .ok_or(ClientError::StaleSession(session))?;
        if !matches!(slot, Slot::Forwarded(_)) {
            return Err(ClientError::SessionState {
                session,
                needed: "forwarded",
                actual: slot.state_name(),
            });
        }
        let taken = std::mem::replace(slot, Slot::Closed);
        let Slot::Forwarded(pass) = taken else {
            unreachable!()
        };
        let (entry_grads, param_grads) = pass.backward(out_grads)?;
        debug_assert!(param_grads.is_empty(), "sealed pass yields no param grads");
        Ok(entry_grads)
    }

    fn close_session(&mut self, session: SessionId) -> Result<(), ClientError> {
        self.sessions
            .remove(&session)
            .map(|_| ())
            .ok_or(ClientError::StaleSession(session))
    }
}
