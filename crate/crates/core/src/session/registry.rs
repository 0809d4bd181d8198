use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{AuthDecision, Authenticator, Clock, SessionError, StubAuthenticator, SystemClock};
use crate::transport::ChannelStream;
use crate::wire::{Direction, NegotiationRequest, SessionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Filling,
    Active,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Registrar,
    Joiner,
}

/// A session whose channels have all joined, handed to its session thread.
#[derive(Debug)]
pub struct ActiveSession {
    pub session_id: SessionId,
    pub direction: Direction,
    /// The registering channel's request.
    pub params: NegotiationRequest,
    /// Ordered by channel index.
    pub streams: Vec<ChannelStream>,
    pub requests: Vec<NegotiationRequest>,
    pub created_at: Instant,
}

#[derive(Debug)]
pub struct JoinOutcome {
    pub session_id: SessionId,
    pub role: Role,
    pub joined: usize,
    pub expected: usize,
    /// Present exactly when this join completed the session.
    pub active: Option<ActiveSession>,
}

/// A refused join; the stream comes back so the caller can reply on it.
#[derive(Debug)]
pub struct Rejection {
    pub error: SessionError,
    pub stream: ChannelStream,
}

struct Filling {
    params: NegotiationRequest,
    joined: BTreeMap<u16, (ChannelStream, NegotiationRequest)>,
    created_at: Instant,
}

enum Entry {
    Filling(Filling),
    Active,
    Closed,
}

/// Shared by the listener and session threads; every operation holds one
/// lock for its whole duration.
pub struct SessionRegistry {
    entries: Mutex<HashMap<SessionId, Entry>>,
    auth: Arc<dyn Authenticator>,
    clock: Arc<dyn Clock>,
}

impl Default for SessionRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self::with(Arc::new(StubAuthenticator), Arc::new(SystemClock))
    }

    pub fn with(auth: Arc<dyn Authenticator>, clock: Arc<dyn Clock>) -> Self {
        SessionRegistry {
            entries: Mutex::new(HashMap::new()),
            auth,
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, HashMap<SessionId, Entry>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn register_or_join(
        &self,
        stream: ChannelStream,
        req: NegotiationRequest,
    ) -> Result<JoinOutcome, Rejection> {
        self.register_or_join_with(stream, req, |_, _| Ok(()))
    }

    /// Like `register_or_join`, but once the join is known to be admissible
    /// `admit` runs on the stream (still under the lock) before it is filed.
    /// The server sends its Accepted reply there, so a channel is never
    /// handed to a session before its reply went out. An `admit` error
    /// rejects the join. Its second argument says whether this join is the
    /// last one, i.e. the session activates once it is filed.
    pub fn register_or_join_with<F>(
        &self,
        mut stream: ChannelStream,
        req: NegotiationRequest,
        admit: F,
    ) -> Result<JoinOutcome, Rejection>
    where
        F: FnOnce(&mut ChannelStream, bool) -> Result<(), SessionError>,
    {
        let reject = |error, stream| Err(Rejection { error, stream });
        if let AuthDecision::Deny(why) = self.auth.authenticate(&req.credentials) {
            return reject(SessionError::AuthDenied(why), stream);
        }
        if let Err(e) = req.validate() {
            return reject(SessionError::Wire(e), stream);
        }
        let id = req.session_id;
        let n = req.channel_count as usize;
        let mut entries = self.lock();
        let mut already = 0;
        let role = match entries.get(&id) {
            Some(Entry::Active | Entry::Closed) => return reject(SessionError::SessionClosed, stream),
            Some(Entry::Filling(f)) => {
                if let Some(why) = mismatch(&f.params, &req) {
                    return reject(SessionError::ParameterMismatch(why), stream);
                }
                if f.joined.contains_key(&req.channel_index) {
                    return reject(SessionError::DuplicateChannelIndex(req.channel_index), stream);
                }
                already = f.joined.len();
                Role::Joiner
            }
            None => Role::Registrar,
        };
        if let Err(e) = admit(&mut stream, already + 1 == n) {
            return reject(e, stream);
        }
        let entry = entries.entry(id).or_insert_with(|| {
            Entry::Filling(Filling {
                params: req.clone(),
                joined: BTreeMap::new(),
                created_at: self.clock.now(),
            })
        });
        let Entry::Filling(filling) = entry else {
            unreachable!("checked above")
        };
        filling.joined.insert(req.channel_index, (stream, req));
        let joined = filling.joined.len();
        let mut out = JoinOutcome {
            session_id: id,
            role,
            joined,
            expected: n,
            active: None,
        };
        if joined == n {
            let Some(Entry::Filling(f)) = entries.insert(id, Entry::Active) else {
                unreachable!()
            };
            let (streams, requests) = f.joined.into_values().unzip();
            out.active = Some(ActiveSession {
                session_id: id,
                direction: f.params.direction,
                params: f.params,
                streams,
                requests,
                created_at: f.created_at,
            });
        }
        Ok(out)
    }

    pub fn state_of(&self, id: SessionId) -> Option<SessionState> {
        self.lock().get(&id).map(|e| match e {
            Entry::Filling(_) => SessionState::Filling,
            Entry::Active => SessionState::Active,
            Entry::Closed => SessionState::Closed,
        })
    }

    pub fn joined_count(&self, id: SessionId) -> usize {
        match self.lock().get(&id) {
            Some(Entry::Filling(f)) => f.joined.len(),
            Some(Entry::Active) => usize::MAX,
            _ => 0,
        }
    }

    pub fn filling_count(&self) -> usize {
        self.lock()
            .values()
            .filter(|e| matches!(e, Entry::Filling(_)))
            .count()
    }

    pub fn active_count(&self) -> usize {
        self.lock()
            .values()
            .filter(|e| matches!(e, Entry::Active))
            .count()
    }

    /// Record that a session ended; its id can never be reused.
    pub fn mark_closed(&self, id: SessionId) {
        if let Some(e) = self.lock().get_mut(&id) {
            *e = Entry::Closed;
        }
    }

    /// Close filling sessions older than `max_fill_wait`, dropping their
    /// streams. Active sessions are never touched.
    pub fn expire_stale(&self, max_fill_wait: Duration) -> Vec<SessionId> {
        let now = self.clock.now();
        let mut entries = self.lock();
        let mut expired: Vec<SessionId> = entries
            .iter()
            .filter_map(|(id, e)| match e {
                Entry::Filling(f) if now.saturating_duration_since(f.created_at) >= max_fill_wait => {
                    Some(*id)
                }
                _ => None,
            })
            .collect();
        expired.sort_by_key(|id| id.0);
        for id in &expired {
            if let Some(Entry::Filling(f)) = entries.insert(*id, Entry::Closed) {
                for (_, (mut s, _)) in f.joined {
                    s.shutdown();
                }
            }
        }
        expired
    }

    /// Close every filling session (server shutdown).
    pub fn expire_all(&self) -> Vec<SessionId> {
        self.expire_stale(Duration::ZERO)
    }
}

/// Session-scoped parameters every channel must agree on.
fn mismatch(a: &NegotiationRequest, b: &NegotiationRequest) -> Option<String> {
    if a.direction != b.direction {
        return Some(format!("direction {} vs {}", b.direction, a.direction));
    }
    if a.channel_count != b.channel_count {
        return Some(format!("channel count {} vs {}", b.channel_count, a.channel_count));
    }
    if a.remote_file_name != b.remote_file_name {
        return Some("remote file name differs".into());
    }
    if a.block_size != b.block_size {
        return Some(format!("block size {} vs {}", b.block_size, a.block_size));
    }
    if a.extended_mode != b.extended_mode {
        return Some("extended mode differs".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use std::thread;

    use super::super::ManualClock;
    use super::*;
    use crate::census::Census;
    use crate::fsm::harness::request;
    use crate::transport::{sim_pair, SimNetConfig};

    fn streams(n: usize) -> Vec<ChannelStream> {
        sim_pair(SimNetConfig::default(), n).1
    }

    fn req(id: u8, i: u16, n: u16) -> NegotiationRequest {
        request(SessionId([id; 16]), Direction::Upload, i, n, 65536)
    }

    #[test]
    fn single_channel_activates_at_once() {
        let r = SessionRegistry::new();
        let s = streams(1).pop().unwrap();
        let out = r.register_or_join(s, req(1, 0, 1)).unwrap();
        assert_eq!(out.role, Role::Registrar);
        assert!(out.active.is_some());
        assert_eq!(r.state_of(SessionId([1; 16])), Some(SessionState::Active));
    }

    #[test]
    fn three_channels_in_any_order() {
        let r = SessionRegistry::new();
        let mut s = streams(3);
        let id = SessionId([2; 16]);
        let a = r.register_or_join(s.remove(0), req(2, 0, 3)).unwrap();
        assert_eq!(a.role, Role::Registrar);
        let b = r.register_or_join(s.remove(1), req(2, 2, 3)).unwrap();
        assert_eq!(b.role, Role::Joiner);
        assert!(b.active.is_none());
        assert_eq!(r.state_of(id), Some(SessionState::Filling));
        let c = r.register_or_join(s.remove(0), req(2, 1, 3)).unwrap();
        let active = c.active.expect("third join activates");
        assert_eq!(active.streams.len(), 3);
        let idx: Vec<u16> = active.requests.iter().map(|q| q.channel_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn mismatched_block_size_is_refused() {
        let r = SessionRegistry::new();
        let mut s = streams(2);
        r.register_or_join(s.remove(0), req(3, 0, 2)).unwrap();
        let mut bad = req(3, 1, 2);
        bad.block_size = 4096;
        let rej = r.register_or_join(s.remove(0), bad).unwrap_err();
        assert!(matches!(rej.error, SessionError::ParameterMismatch(_)));
        assert_eq!(r.state_of(SessionId([3; 16])), Some(SessionState::Filling));
    }

    #[test]
    fn duplicate_index_and_closed_sessions() {
        let r = SessionRegistry::new();
        let mut s = streams(3);
        r.register_or_join(s.remove(0), req(4, 0, 2)).unwrap();
        let rej = r.register_or_join(s.remove(0), req(4, 0, 2)).unwrap_err();
        assert!(matches!(rej.error, SessionError::DuplicateChannelIndex(0)));
        r.mark_closed(SessionId([4; 16]));
        let rej = r.register_or_join(rej.stream, req(4, 1, 2)).unwrap_err();
        assert!(matches!(rej.error, SessionError::SessionClosed));
    }

    #[test]
    fn denied_credentials() {
        let r = SessionRegistry::new();
        let mut q = req(5, 0, 1);
        q.credentials = b"deny".to_vec();
        let rej = r.register_or_join(streams(1).pop().unwrap(), q).unwrap_err();
        assert!(matches!(rej.error, SessionError::AuthDenied(_)));
        assert_eq!(r.state_of(SessionId([5; 16])), None);
    }

    #[test]
    fn expiry_takes_only_stale_filling_sessions() {
        let clock = ManualClock::new();
        let r = SessionRegistry::with(Arc::new(StubAuthenticator), Arc::new(clock.clone()));
        let census = Census::new();
        let mut s = streams(4);
        for st in &mut s {
            st.attach_census(&census);
        }
        r.register_or_join(s.remove(0), req(6, 0, 2)).unwrap();
        r.register_or_join(s.remove(0), req(7, 0, 2)).unwrap();
        r.register_or_join(s.remove(0), req(9, 0, 1)).unwrap(); // active
        clock.advance(Duration::from_secs(31));
        r.register_or_join(s.remove(0), req(8, 0, 2)).unwrap(); // fresh
        let gone = r.expire_stale(Duration::from_secs(30));
        assert_eq!(gone, vec![SessionId([6; 16]), SessionId([7; 16])]);
        assert_eq!(r.state_of(SessionId([8; 16])), Some(SessionState::Filling));
        assert_eq!(r.state_of(SessionId([9; 16])), Some(SessionState::Active));
        // Expired streams are closed; only the fresh session's remains.
        assert_eq!(census.streams(), 1);
    }

    #[test]
    fn racing_joins_never_overfill() {
        for round in 0..20u8 {
            let r = Arc::new(SessionRegistry::new());
            let n = 8u16;
            let handles: Vec<_> = streams(n as usize + 2)
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    let r = r.clone();
                    // Two extra threads race for already-taken indices.
                    let i = (k as u16) % n;
                    thread::spawn(move || r.register_or_join(s, req(100 + round, i, n)).ok())
                })
                .collect();
            let outs: Vec<JoinOutcome> = handles
                .into_iter()
                .filter_map(|h| h.join().unwrap())
                .collect();
            assert_eq!(outs.len(), n as usize);
            assert_eq!(outs.iter().filter(|o| o.role == Role::Registrar).count(), 1);
            assert_eq!(outs.iter().filter(|o| o.active.is_some()).count(), 1);
        }
    }
}
