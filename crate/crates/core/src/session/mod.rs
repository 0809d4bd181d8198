//! Session registration and the client side of the negotiation handshake.
//!
//! The first channel presenting an unknown session id registers it; the
//! other `n - 1` join. A session becomes active, and its streams leave the
//! registry, only when every channel has joined.

mod negotiate;
mod registry;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::transport::TransportError;
use crate::wire::WireError;

pub use negotiate::{
    negotiate_client, negotiate_with, read_service_request, service_header, ClientParams,
    ClientSession, AUTH_PREFIX, FILE_SIZE_KEY, OVERWRITE_KEY,
};
pub use registry::{ActiveSession, JoinOutcome, Rejection, Role, SessionRegistry, SessionState};

pub const DEFAULT_FILL_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("channel {0} already joined this session")]
    DuplicateChannelIndex(u16),
    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),
    #[error("session is closed")]
    SessionClosed,
    /// The server refused the join for its own reasons (e.g. the target
    /// could not be created).
    #[error("{0}")]
    Admission(String),
    #[error("authentication denied: {0}")]
    AuthDenied(String),
    #[error("server rejected channel {channel}: {reason}")]
    Rejected { channel: u16, reason: String },
    #[error("channel {channel}: {source}")]
    Channel {
        channel: u16,
        #[source]
        source: TransportError,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl SessionError {
    /// Index of the channel the error is about, when there is one.
    pub fn channel(&self) -> Option<u16> {
        match self {
            SessionError::DuplicateChannelIndex(i) => Some(*i),
            SessionError::Rejected { channel, .. } | SessionError::Channel { channel, .. } => {
                Some(*channel)
            }
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthDecision {
    Allow,
    Deny(String),
}

/// Decides whether a channel's credentials admit it.
pub trait Authenticator: Send + Sync {
    fn authenticate(&self, credentials: &[u8]) -> AuthDecision;
}

/// Admits everything except the literal credential `deny`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubAuthenticator;

impl Authenticator for StubAuthenticator {
    fn authenticate(&self, credentials: &[u8]) -> AuthDecision {
        if credentials == b"deny" {
            AuthDecision::Deny("credentials refused".into())
        } else {
            AuthDecision::Allow
        }
    }
}

/// Time source for fill-timeout bookkeeping.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<Instant>>);

impl ManualClock {
    pub fn new() -> Self {
        ManualClock(Arc::new(Mutex::new(Instant::now())))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Instant {
        *self.0.lock().unwrap()
    }
}
