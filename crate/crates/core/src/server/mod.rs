//! The daemon. Three fixed threads (listener, waiter, housekeeping) plus
//! one event-loop thread per active session, and a disk thread per session
//! when the async disk engine is selected.
//!
//! The listener reads each new channel's service selector and request,
//! admits it into the [`SessionRegistry`] and replies. When the last channel
//! of a session joins, the streams go to the waiter, which starts the
//! session thread and later reaps it.

mod log;
mod paths;
mod session;

use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::census::{Census, CensusSnapshot, ThreadRole};
use crate::piod::TransferCounters;
use crate::session::{
    read_service_request, ActiveSession, Authenticator, Clock, Rejection, SessionError,
    SessionRegistry, StubAuthenticator, SystemClock, AUTH_PREFIX, DEFAULT_FILL_TIMEOUT,
    FILE_SIZE_KEY, OVERWRITE_KEY,
};
use crate::storage::DiskEngineMode;
use crate::transport::{listen, Acceptor, ChannelStream, Endpoint, TransportError};
use crate::wire::{self, ChannelEvent, Direction, NegotiationReply, NegotiationRequest, SessionId};

pub use log::{Level, Logger};
pub use paths::resolve;

/// Largest socket buffer a client may ask for.
const MAX_TCP_WINDOW: u64 = 64 << 20;
/// Finished sessions kept in the metrics report.
const KEEP_FINISHED: usize = 256;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen: {0}")]
    Listen(#[from] TransportError),
    #[error("served root {0} is not a directory")]
    Root(PathBuf),
    #[error("cannot start thread: {0}")]
    Spawn(#[from] io::Error),
}

#[derive(Clone)]
pub struct ServerConfig {
    pub bind: Endpoint,
    pub root: PathBuf,
    pub disk_mode: DiskEngineMode,
    /// How long a registered session may wait for its remaining channels.
    pub fill_timeout: Duration,
    /// A running session with no progress for this long fails.
    pub idle_timeout: Duration,
    /// Sessions filling or running at once; further registrations are refused.
    pub max_sessions: usize,
    /// Bound on reading a new channel's selector and request.
    pub handshake_timeout: Duration,
    /// How long a closing session may spend draining its output.
    pub close_grace: Duration,
    pub poll_interval: Duration,
    pub auth: Arc<dyn Authenticator>,
    pub clock: Arc<dyn Clock>,
    pub log: Logger,
}

impl ServerConfig {
    /// Loopback, ephemeral port, sync disk, stderr logging.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ServerConfig {
            bind: Endpoint::ephemeral("127.0.0.1"),
            root: root.into(),
            disk_mode: DiskEngineMode::Sync,
            fill_timeout: DEFAULT_FILL_TIMEOUT,
            idle_timeout: Duration::from_secs(60),
            max_sessions: 64,
            handshake_timeout: Duration::from_secs(10),
            close_grace: Duration::from_secs(2),
            poll_interval: Duration::from_millis(100),
            auth: Arc::new(StubAuthenticator),
            clock: Arc::new(SystemClock),
            log: Logger::stderr(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionReport {
    pub session_id: String,
    pub direction: Direction,
    pub channels: u16,
    pub block_size: u64,
    pub target: String,
    pub status: SessionStatus,
    pub error: Option<String>,
    pub counters: TransferCounters,
    pub elapsed_secs: f64,
}

/// Point-in-time view of the server.
#[derive(Debug, Clone, Serialize)]
pub struct ServerMetrics {
    pub filling_sessions: usize,
    pub running_sessions: usize,
    pub completed: u64,
    pub failed: u64,
    pub rejected_channels: u64,
    /// Payload bytes received by uploads and sent by downloads.
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub census: CensusSnapshot,
    /// Running sessions and the most recent finished ones.
    pub sessions: Vec<SessionReport>,
}

struct Slot {
    id: SessionId,
    direction: Direction,
    channels: u16,
    block_size: u64,
    target: String,
    started: Instant,
    elapsed: Option<Duration>,
    status: SessionStatus,
    error: Option<String>,
    live: Arc<Mutex<TransferCounters>>,
}

#[derive(Default)]
struct Tally {
    completed: u64,
    failed: u64,
    rejected: u64,
    bytes_in: u64,
    bytes_out: u64,
    slots: Vec<Slot>,
}

pub(crate) struct Shared {
    cfg: ServerConfig,
    census: Census,
    registry: Arc<SessionRegistry>,
    stop: AtomicBool,
    abort_at: Mutex<Option<Instant>>,
    tally: Mutex<Tally>,
}

impl Shared {
    fn tally(&self) -> MutexGuard<'_, Tally> {
        self.tally.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Whether running sessions should give up now.
    fn abort_due(&self) -> bool {
        self.abort_at
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .is_some_and(|t| Instant::now() >= t)
    }

    fn open_slot(&self, active: &ActiveSession) -> Arc<Mutex<TransferCounters>> {
        let live = Arc::new(Mutex::new(TransferCounters::default()));
        self.tally().slots.push(Slot {
            id: active.session_id,
            direction: active.direction,
            channels: active.params.channel_count,
            block_size: active.params.block_size,
            target: active.params.remote_file_name.clone(),
            started: Instant::now(),
            elapsed: None,
            status: SessionStatus::Running,
            error: None,
            live: live.clone(),
        });
        live
    }

    fn close_slot(&self, id: SessionId, error: Option<String>) {
        let mut t = self.tally();
        let Some(slot) = t.slots.iter_mut().find(|s| s.id == id) else {
            return;
        };
        slot.elapsed = Some(slot.started.elapsed());
        slot.status = if error.is_none() {
            SessionStatus::Succeeded
        } else {
            SessionStatus::Failed
        };
        slot.error = error;
        let moved = slot.live.lock().unwrap_or_else(|p| p.into_inner()).payload_bytes;
        let (ok, dir) = (slot.status == SessionStatus::Succeeded, slot.direction);
        match dir {
            Direction::Upload => t.bytes_in += moved,
            Direction::Download => t.bytes_out += moved,
        }
        if ok {
            t.completed += 1;
        } else {
            t.failed += 1;
        }
        let finished = t
            .slots
            .iter()
            .filter(|s| s.status != SessionStatus::Running)
            .count();
        if finished > KEEP_FINISHED {
            if let Some(i) = t.slots.iter().position(|s| s.status != SessionStatus::Running) {
                t.slots.remove(i);
            }
        }
    }

    fn metrics(&self) -> ServerMetrics {
        let t = self.tally();
        let mut m = ServerMetrics {
            filling_sessions: self.registry.filling_count(),
            running_sessions: 0,
            completed: t.completed,
            failed: t.failed,
            rejected_channels: t.rejected,
            bytes_in: t.bytes_in,
            bytes_out: t.bytes_out,
            census: self.census.snapshot(),
            sessions: Vec::with_capacity(t.slots.len()),
        };
        for s in &t.slots {
            let counters = s.live.lock().unwrap_or_else(|p| p.into_inner()).clone();
            if s.status == SessionStatus::Running {
                m.running_sessions += 1;
                match s.direction {
                    Direction::Upload => m.bytes_in += counters.payload_bytes,
                    Direction::Download => m.bytes_out += counters.payload_bytes,
                }
            }
            m.sessions.push(SessionReport {
                session_id: s.id.to_string(),
                direction: s.direction,
                channels: s.channels,
                block_size: s.block_size,
                target: s.target.clone(),
                status: s.status,
                error: s.error.clone(),
                counters,
                elapsed_secs: s.elapsed.unwrap_or_else(|| s.started.elapsed()).as_secs_f64(),
            });
        }
        m
    }
}

/// A running server. Dropping it shuts it down without grace.
pub struct ServerHandle {
    endpoint: Endpoint,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

/// Bind, then start the listener, waiter and housekeeping threads.
pub fn start(cfg: ServerConfig) -> Result<ServerHandle, ServerError> {
    if !cfg.root.is_dir() {
        return Err(ServerError::Root(cfg.root.clone()));
    }
    let census = Census::new();
    let mut acceptor = listen(&cfg.bind)?;
    acceptor.set_census(census.clone());
    let endpoint = acceptor.local_endpoint()?;
    let registry = Arc::new(SessionRegistry::with(cfg.auth.clone(), cfg.clock.clone()));
    let shared = Arc::new(Shared {
        cfg,
        census: census.clone(),
        registry,
        stop: AtomicBool::new(false),
        abort_at: Mutex::new(None),
        tally: Mutex::new(Tally::default()),
    });
    let (tx, rx) = mpsc::channel();
    let mut threads = Vec::with_capacity(3);
    let sh = shared.clone();
    threads.push(census.spawn(ThreadRole::Waiter, "xdfs-waiter".into(), move || {
        waiter_loop(sh, rx)
    })?);
    let sh = shared.clone();
    threads.push(census.spawn(ThreadRole::Common, "xdfs-common".into(), move || {
        common_loop(sh)
    })?);
    let sh = shared.clone();
    threads.push(census.spawn(ThreadRole::Listener, "xdfs-listener".into(), move || {
        listener_loop(sh, acceptor, tx)
    })?);
    shared.cfg.log.info(None, format!("listening on {endpoint}, root {}", shared.cfg.root.display()));
    Ok(ServerHandle {
        endpoint,
        shared,
        threads,
    })
}

impl ServerHandle {
    pub fn local_endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn census(&self) -> &Census {
        &self.shared.census
    }

    pub fn registry(&self) -> &Arc<SessionRegistry> {
        &self.shared.registry
    }

    pub fn metrics(&self) -> ServerMetrics {
        self.shared.metrics()
    }

    pub fn logger(&self) -> &Logger {
        &self.shared.cfg.log
    }

    /// Stop accepting, drop sessions still filling, give running sessions
    /// `grace` to finish, then abort them. Returns the final metrics.
    pub fn shutdown(mut self, grace: Duration) -> ServerMetrics {
        self.stop(grace);
        self.shared.metrics()
    }

    fn stop(&mut self, grace: Duration) {
        if self.threads.is_empty() {
            return;
        }
        *self.shared.abort_at.lock().unwrap_or_else(|p| p.into_inner()) = Some(Instant::now() + grace);
        self.shared.stop.store(true, Ordering::SeqCst);
        // Listener last in the list: join it first so nothing new registers.
        let listener = self.threads.pop();
        if let Some(h) = listener {
            let _ = h.join();
        }
        for id in self.shared.registry.expire_all() {
            self.shared.cfg.log.warn(Some(id), "dropped while filling: server shutting down");
        }
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
        self.shared.cfg.log.info(None, "server stopped");
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop(Duration::ZERO);
    }
}

fn listener_loop(shared: Arc<Shared>, acceptor: Acceptor, tx: Sender<ActiveSession>) {
    let poll = shared.cfg.poll_interval;
    while !shared.stopping() {
        match acceptor.accept(poll) {
            Ok(Some(stream)) => admit_channel(&shared, stream, &tx),
            Ok(None) => {}
            Err(e) => {
                shared.cfg.log.warn(None, format!("accept failed: {e}"));
                thread::sleep(poll);
            }
        }
    }
}

fn reject(shared: &Shared, mut stream: ChannelStream, id: SessionId, reason: String) {
    shared.tally().rejected += 1;
    shared.cfg.log.warn(Some(id), format!("rejected channel: {reason}"));
    if let Ok(bytes) = wire::encode_reply(&NegotiationReply::rejected(id, reason)) {
        let _ = stream.send_all(&bytes, Instant::now() + Duration::from_secs(1));
    }
    stream.shutdown();
}

fn rejection_reason(e: &SessionError) -> String {
    match e {
        SessionError::AuthDenied(why) => format!("{AUTH_PREFIX}{why}"),
        other => other.to_string(),
    }
}

fn upload_size(req: &NegotiationRequest) -> Result<Option<u64>, String> {
    req.extended_mode
        .get(FILE_SIZE_KEY)
        .map(|v| v.parse::<u64>().map_err(|_| format!("bad {FILE_SIZE_KEY} {v:?}")))
        .transpose()
}

fn wants_overwrite(req: &NegotiationRequest) -> bool {
    req.extended_mode.get(OVERWRITE_KEY).is_some_and(|v| v == "1")
}

/// Handshake one new channel and file it with its session.
fn admit_channel(shared: &Shared, mut stream: ChannelStream, tx: &Sender<ActiveSession>) {
    let cfg = &shared.cfg;
    let deadline = Instant::now() + cfg.handshake_timeout;
    let (event, req) = match read_service_request(&mut stream, deadline) {
        Ok(x) => x,
        Err(e) => {
            cfg.log.warn(None, format!("handshake from {} failed: {e}", stream.peer_label()));
            return;
        }
    };
    let id = req.session_id;
    if event != req.direction.mode_event() {
        let reason = match event {
            ChannelEvent::Xftsm | ChannelEvent::XftsmUpload => {
                format!("{event} service does not match a {} request", req.direction)
            }
            _ => format!("{event} mode not implemented"),
        };
        return reject(shared, stream, id, reason);
    }
    let registry = &shared.registry;
    if registry.state_of(id).is_none()
        && registry.filling_count() + registry.active_count() >= cfg.max_sessions
    {
        return reject(shared, stream, id, "server busy".into());
    }
    let (target, size) = match upload_size(&req).and_then(|up| {
        let (target, size) = resolve(&cfg.root, &req.remote_file_name, req.direction, wants_overwrite(&req))?;
        Ok(match req.direction {
            Direction::Download => (target, size),
            Direction::Upload => (target, up.unwrap_or(0)),
        })
    }) {
        Ok(x) => x,
        Err(reason) => return reject(shared, stream, id, reason),
    };
    let window = req.tcp_window_size.min(MAX_TCP_WINDOW) as usize;
    if window > 0 {
        let _ = stream.set_buffer_size(window);
    }
    let (index, count) = (req.channel_index, req.channel_count);
    let upload = req.direction == Direction::Upload;
    let joined = registry.register_or_join_with(stream, req, |s, completes| {
        // Create the destination before the last reply goes out, so a
        // client that sees every channel accepted (and, for an empty file,
        // is already done) always finds it in place.
        if upload && completes {
            target
                .open_write(Some(size))
                .map_err(|e| SessionError::Admission(format!("cannot create target: {e}")))?;
        }
        let bytes = wire::encode_reply(&NegotiationReply::accepted(id, size))?;
        s.send_all(&bytes, deadline)?;
        Ok(())
    });
    match joined {
        Ok(outcome) => {
            cfg.log.info(
                Some(id),
                format!("channel {index} joined ({}/{count})", outcome.joined.min(count as usize)),
            );
            if let Some(active) = outcome.active {
                if let Err(mpsc::SendError(active)) = tx.send(active) {
                    registry.mark_closed(active.session_id);
                }
            }
        }
        Err(Rejection { error, stream }) => reject(shared, stream, id, rejection_reason(&error)),
    }
}

fn waiter_loop(shared: Arc<Shared>, rx: Receiver<ActiveSession>) {
    let mut running: Vec<JoinHandle<()>> = Vec::new();
    loop {
        match rx.recv_timeout(shared.cfg.poll_interval) {
            Ok(active) => {
                let id = active.session_id;
                let sh = shared.clone();
                let name = format!("xdfs-session-{}", &id.to_string()[..8]);
                match shared.census.spawn(ThreadRole::Session, name, move || session::run(sh, active)) {
                    Ok(h) => running.push(h),
                    Err(e) => {
                        shared.cfg.log.error(Some(id), format!("cannot start session thread: {e}"));
                        shared.registry.mark_closed(id);
                        shared.tally().failed += 1;
                    }
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        let (done, live): (Vec<_>, Vec<_>) = running.drain(..).partition(|h| h.is_finished());
        running = live;
        for h in done {
            let _ = h.join();
        }
    }
    for h in running {
        let _ = h.join();
    }
}

fn common_loop(shared: Arc<Shared>) {
    let tick = shared.cfg.poll_interval.min(Duration::from_millis(100));
    while !shared.stopping() {
        thread::sleep(tick);
        for id in shared.registry.expire_stale(shared.cfg.fill_timeout) {
            shared.cfg.log.warn(Some(id), "fill timeout: not every channel joined");
        }
    }
}
