//! Byte-stream transport beneath every channel.
//!
//! Two backends sit behind [`ChannelStream`]: real stream sockets
//! ([`tcp`]) and a deterministic in-memory network ([`sim`]) used by the
//! conformance and fault-injection tests. Streams are always non-blocking;
//! every wait goes through [`poll_readiness`], which has level-triggered
//! `select()`-style semantics.

pub mod sim;
pub mod tcp;

use std::fmt;
use std::io::{self, IoSlice};
use std::os::fd::{AsRawFd, RawFd};
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::census::{Census, StreamGuard};
use crate::wire::{self, FrameLen};

pub use sim::{sim_net, sim_pair, FaultKind, Fragmentation, NetHandle, SimDirection, SimFault, SimNetConfig};
pub use tcp::{connect, connect_timeout, listen, Acceptor};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bind failed: {0}")]
    BindFailure(#[source] io::Error),
    #[error("connect failed: {0}")]
    ConnectFailure(#[source] io::Error),
    #[error("timed out")]
    Timeout,
    #[error("invalid stream: {0}")]
    StreamInvalid(String),
    #[error("peer closed the stream")]
    PeerClosed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}

pub type Result<T> = std::result::Result<T, TransportError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self> {
        let host = host.into();
        if host.is_empty() {
            return Err(TransportError::StreamInvalid("empty host".into()));
        }
        if port == 0 {
            return Err(TransportError::StreamInvalid("port must be 1-65535".into()));
        }
        Ok(Endpoint { host, port })
    }

    /// Listening endpoints may use port 0 to request an ephemeral port.
    pub fn ephemeral(host: impl Into<String>) -> Self {
        Endpoint {
            host: host.into(),
            port: 0,
        }
    }

    /// Parse `HOST:PORT`, accepting bracketed IPv6 hosts.
    pub fn parse(s: &str) -> Result<Self> {
        let (host, port) = split_host_port(s)?;
        Endpoint::new(host, port)
    }

    /// Like `parse`, but port 0 (any free port) is allowed.
    pub fn parse_bind(s: &str) -> Result<Self> {
        match split_host_port(s)? {
            (host, 0) if !host.is_empty() => Ok(Endpoint::ephemeral(host)),
            (host, port) => Endpoint::new(host, port),
        }
    }
}

fn split_host_port(s: &str) -> Result<(&str, u16)> {
    let bad = || TransportError::StreamInvalid(format!("bad endpoint {s:?}"));
    let (host, port) = s.rsplit_once(':').ok_or_else(bad)?;
    let host = host.trim_start_matches('[').trim_end_matches(']');
    Ok((host, port.parse().map_err(|_| bad())?))
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.host.contains(':') {
            write!(f, "[{}]:{}", self.host, self.port)
        } else {
            write!(f, "{}:{}", self.host, self.port)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Interest {
    pub read: bool,
    pub write: bool,
}

impl Interest {
    pub const NONE: Interest = Interest {
        read: false,
        write: false,
    };
    pub const READ: Interest = Interest {
        read: true,
        write: false,
    };
    pub const WRITE: Interest = Interest {
        read: false,
        write: true,
    };
    pub const BOTH: Interest = Interest {
        read: true,
        write: true,
    };

    pub fn is_empty(&self) -> bool {
        !self.read && !self.write
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Readiness {
    pub readable: bool,
    pub writable: bool,
    /// The peer hung up or the stream is in an error state.
    pub hangup: bool,
}

impl Readiness {
    pub fn any(&self) -> bool {
        self.readable || self.writable || self.hangup
    }
}

pub(crate) enum Backend {
    Tcp(tcp::TcpChannel),
    Sim(sim::SimStream),
}

/// One duplex, non-blocking byte stream of a session.
pub struct ChannelStream {
    backend: Backend,
    guard: Option<StreamGuard>,
}

impl ChannelStream {
    pub(crate) fn new(backend: Backend) -> Self {
        ChannelStream {
            backend,
            guard: None,
        }
    }

    /// Count this stream in `census` until it is dropped.
    pub fn attach_census(&mut self, census: &Census) {
        if self.guard.is_none() {
            self.guard = Some(census.track_stream());
        }
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.backend, Backend::Sim(_))
    }

    /// Reads available bytes; `WouldBlock` when none, `Ok(0)` at orderly close.
    pub fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match &mut self.backend {
            Backend::Tcp(t) => t.read(buf),
            Backend::Sim(s) => s.read(buf),
        }
    }

    pub fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match &mut self.backend {
            Backend::Tcp(t) => t.write(buf),
            Backend::Sim(s) => s.write(buf),
        }
    }

    pub fn write_vectored(&mut self, bufs: &[IoSlice<'_>]) -> io::Result<usize> {
        match &mut self.backend {
            Backend::Tcp(t) => t.write_vectored(bufs),
            Backend::Sim(s) => s.write_vectored(bufs),
        }
    }

    pub fn shutdown(&mut self) {
        match &mut self.backend {
            Backend::Tcp(t) => t.shutdown(),
            Backend::Sim(s) => s.close(),
        }
    }

    /// Request send/receive buffers of `bytes` (best effort).
    pub fn set_buffer_size(&mut self, bytes: usize) -> io::Result<()> {
        match &mut self.backend {
            Backend::Tcp(t) => t.set_buffer_size(bytes),
            Backend::Sim(_) => Ok(()),
        }
    }

    /// Achieved (send, receive) buffer sizes as reported by the backend.
    pub fn buffer_sizes(&self) -> io::Result<(usize, usize)> {
        match &self.backend {
            Backend::Tcp(t) => t.buffer_sizes(),
            Backend::Sim(s) => {
                let cap = s.capacity();
                Ok((cap, cap))
            }
        }
    }

    pub fn peer_label(&self) -> String {
        match &self.backend {
            Backend::Tcp(t) => t.peer_label(),
            Backend::Sim(s) => s.label(),
        }
    }

    /// Blocking write of the whole buffer, waiting through `poll_readiness`.
    pub fn send_all(&mut self, mut data: &[u8], deadline: Instant) -> Result<()> {
        while !data.is_empty() {
            match self.write(data) {
                Ok(0) => return Err(TransportError::PeerClosed),
                Ok(n) => data = &data[n..],
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    self.wait(Interest::WRITE, deadline)?;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if is_disconnect(&e) => return Err(TransportError::PeerClosed),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Blocking read of one variable-length frame, never reading past its end.
    pub fn recv_frame(
        &mut self,
        frame_len: impl Fn(&[u8]) -> wire::Result<FrameLen>,
        deadline: Instant,
    ) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        loop {
            let missing = match frame_len(&buf)? {
                FrameLen::Complete(n) => {
                    debug_assert_eq!(n, buf.len());
                    return Ok(buf);
                }
                FrameLen::Incomplete(n) => n,
            };
            let start = buf.len();
            buf.resize(start + missing, 0);
            let mut filled = start;
            while filled < buf.len() {
                match self.read(&mut buf[filled..]) {
                    Ok(0) => return Err(TransportError::PeerClosed),
                    Ok(n) => filled += n,
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        self.wait(Interest::READ, deadline)?;
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                    Err(e) if is_disconnect(&e) => return Err(TransportError::PeerClosed),
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }

    fn wait(&self, interest: Interest, deadline: Instant) -> Result<()> {
        let now = Instant::now();
        if now >= deadline {
            return Err(TransportError::Timeout);
        }
        poll_readiness(&[self], &[interest], deadline - now)?;
        Ok(())
    }

    pub(crate) fn raw_fd(&self) -> Option<RawFd> {
        match &self.backend {
            Backend::Tcp(t) => Some(t.as_raw_fd()),
            Backend::Sim(_) => None,
        }
    }

    pub(crate) fn sim(&self) -> Option<&sim::SimStream> {
        match &self.backend {
            Backend::Sim(s) => Some(s),
            Backend::Tcp(_) => None,
        }
    }
}

impl Drop for ChannelStream {
    fn drop(&mut self) {
        if let Backend::Sim(s) = &mut self.backend {
            s.close();
        }
    }
}

impl fmt::Debug for ChannelStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelStream({})", self.peer_label())
    }
}

pub(crate) fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::NotConnected
            | io::ErrorKind::UnexpectedEof
    )
}

/// Cross-thread wake-up for a thread blocked in [`poll_with_waker`].
#[derive(Clone)]
pub struct Waker {
    inner: Arc<WakerInner>,
}

struct WakerInner {
    flag: AtomicBool,
    pipe_rx: UnixStream,
    pipe_tx: UnixStream,
    sims: Mutex<Vec<sim::NetHandle>>,
}

impl Waker {
    pub fn new() -> io::Result<Self> {
        let (pipe_tx, pipe_rx) = UnixStream::pair()?;
        pipe_tx.set_nonblocking(true)?;
        pipe_rx.set_nonblocking(true)?;
        Ok(Waker {
            inner: Arc::new(WakerInner {
                flag: AtomicBool::new(false),
                pipe_rx,
                pipe_tx,
                sims: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn wake(&self) {
        if !self.inner.flag.swap(true, Ordering::SeqCst) {
            use std::io::Write;
            let _ = (&self.inner.pipe_tx).write(&[1]);
        }
        for net in self.inner.sims.lock().unwrap().iter() {
            net.notify();
        }
    }

    fn take(&self) -> bool {
        if self.inner.flag.swap(false, Ordering::SeqCst) {
            use std::io::Read;
            let mut sink = [0u8; 64];
            while matches!((&self.inner.pipe_rx).read(&mut sink), Ok(n) if n > 0) {}
            true
        } else {
            false
        }
    }

    fn is_set(&self) -> bool {
        self.inner.flag.load(Ordering::SeqCst)
    }

    fn register_sim(&self, net: &sim::NetHandle) {
        let mut sims = self.inner.sims.lock().unwrap();
        if !sims.iter().any(|n| n.same(net)) {
            sims.push(net.clone());
        }
    }
}

/// Level-triggered readiness over `streams`; an all-empty report means the
/// timeout elapsed.
pub fn poll_readiness(
    streams: &[&ChannelStream],
    interest: &[Interest],
    timeout: Duration,
) -> Result<Vec<Readiness>> {
    poll_with_waker(streams, interest, None, timeout).map(|(r, _)| r)
}

/// Like [`poll_readiness`] but also returns early (with `true`) when
/// `waker` fires.
pub fn poll_with_waker(
    streams: &[&ChannelStream],
    interest: &[Interest],
    waker: Option<&Waker>,
    timeout: Duration,
) -> Result<(Vec<Readiness>, bool)> {
    if streams.is_empty() && waker.is_none() {
        return Err(TransportError::StreamInvalid(
            "poll over an empty stream list".into(),
        ));
    }
    if streams.len() != interest.len() {
        return Err(TransportError::StreamInvalid(
            "interest list length does not match stream list".into(),
        ));
    }
    let deadline = Instant::now() + timeout;

    let all_tcp = streams.iter().all(|s| s.raw_fd().is_some());
    if all_tcp {
        return poll_fds(streams, interest, waker, timeout);
    }
    let first_net = streams.iter().find_map(|s| s.sim()).map(|s| s.net());
    let one_net = first_net.as_ref().is_some_and(|net| {
        streams
            .iter()
            .all(|s| s.sim().is_some_and(|sim| sim.net().same(net)))
    });
    if one_net {
        let net = first_net.unwrap();
        if let Some(w) = waker {
            w.register_sim(&net);
        }
        return Ok(net.poll(streams, interest, waker, deadline));
    }

    // Mixed backends or several simulated networks: poll in short slices.
    if let Some(w) = waker {
        for s in streams.iter().filter_map(|s| s.sim()) {
            w.register_sim(&s.net());
        }
    }
    loop {
        let mut report = vec![Readiness::default(); streams.len()];
        let mut any = false;
        for (i, s) in streams.iter().enumerate() {
            if let Some(sim) = s.sim() {
                report[i] = sim.readiness(interest[i]);
                any |= report[i].any();
            }
        }
        let now = Instant::now();
        let slice = if any {
            Duration::ZERO
        } else {
            deadline.saturating_duration_since(now).min(Duration::from_millis(1))
        };
        let tcp_idx: Vec<usize> = (0..streams.len())
            .filter(|&i| streams[i].raw_fd().is_some())
            .collect();
        let tcp_streams: Vec<&ChannelStream> = tcp_idx.iter().map(|&i| streams[i]).collect();
        let tcp_interest: Vec<Interest> = tcp_idx.iter().map(|&i| interest[i]).collect();
        let (tcp_report, mut woke) = poll_fds(&tcp_streams, &tcp_interest, waker, slice)?;
        for (k, &i) in tcp_idx.iter().enumerate() {
            report[i] = tcp_report[k];
            any |= report[i].any();
        }
        if !woke {
            woke = waker.is_some_and(|w| w.take());
        }
        if any || woke || Instant::now() >= deadline {
            return Ok((report, woke));
        }
    }
}

fn poll_fds(
    streams: &[&ChannelStream],
    interest: &[Interest],
    waker: Option<&Waker>,
    timeout: Duration,
) -> Result<(Vec<Readiness>, bool)> {
    let mut fds: Vec<libc::pollfd> = streams
        .iter()
        .zip(interest)
        .map(|(s, i)| libc::pollfd {
            fd: s.raw_fd().expect("socket stream"),
            events: (if i.read { libc::POLLIN } else { 0 })
                | (if i.write { libc::POLLOUT } else { 0 }),
            revents: 0,
        })
        .collect();
    if let Some(w) = waker {
        fds.push(libc::pollfd {
            fd: w.inner.pipe_rx.as_raw_fd(),
            events: libc::POLLIN,
            revents: 0,
        });
        if w.is_set() {
            let report = vec![Readiness::default(); streams.len()];
            w.take();
            return Ok((report, true));
        }
    }
    let deadline = Instant::now() + timeout;
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let ms = remaining.as_micros().div_ceil(1000).min(i32::MAX as u128) as i32;
        let rc = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, ms) };
        if rc < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err.into());
        }
        break;
    }
    let mut report = Vec::with_capacity(streams.len());
    for (pfd, want) in fds.iter().zip(interest) {
        if pfd.revents & libc::POLLNVAL != 0 {
            return Err(TransportError::StreamInvalid(format!(
                "descriptor {} is not open",
                pfd.fd
            )));
        }
        let hup = pfd.revents & (libc::POLLHUP | libc::POLLERR) != 0;
        report.push(Readiness {
            readable: want.read && (pfd.revents & libc::POLLIN != 0 || hup),
            writable: want.write && (pfd.revents & libc::POLLOUT != 0 || hup),
            hangup: hup,
        });
    }
    let woke = waker.is_some_and(|w| w.take());
    Ok((report, woke))
}

/// Indices of streams with any readiness in `report`.
pub fn ready_indices(report: &[Readiness]) -> Vec<usize> {
    report
        .iter()
        .enumerate()
        .filter(|(_, r)| r.any())
        .map(|(i, _)| i)
        .collect()
}
