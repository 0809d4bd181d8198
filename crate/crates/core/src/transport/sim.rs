//! Deterministic in-memory network.
//!
//! Each simulated channel is a pair of bounded FIFO pipes. Read boundaries
//! under [`Fragmentation::RandomSplit`] are a pure function of the seed and
//! the byte position, so a given byte stream is always split the same way.
//! Latency and bandwidth caps delay when bytes become visible to the
//! reader; faults cut or freeze a pipe at an exact byte position.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, IoSlice};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Backend, ChannelStream, Interest, Readiness, Waker};

pub const DEFAULT_SIM_BUFFER: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fragmentation {
    None,
    RandomSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimDirection {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// The connection closes once the position is reached; bytes past it are lost.
    Close,
    /// Bytes past the position are never delivered.
    Stall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimFault {
    pub channel: usize,
    pub direction: SimDirection,
    pub position: u64,
    pub kind: FaultKind,
}

#[derive(Debug, Clone)]
pub struct SimNetConfig {
    pub seed: u64,
    pub per_channel_latency: Duration,
    /// Bytes per second per channel direction; `None` is unlimited.
    pub bandwidth_cap: Option<u64>,
    pub fragmentation: Fragmentation,
    pub fault_plan: Vec<SimFault>,
    /// Per-direction pipe capacity in bytes.
    pub buffer_capacity: usize,
    /// Keep every delivery event, not only the running hash.
    pub record_trace: bool,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig {
            seed: 0,
            per_channel_latency: Duration::ZERO,
            bandwidth_cap: None,
            fragmentation: Fragmentation::None,
            fault_plan: Vec::new(),
            buffer_capacity: DEFAULT_SIM_BUFFER,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimOp {
    Write,
    Read,
    Eof,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimTraceEntry {
    pub channel: usize,
    pub direction: SimDirection,
    pub op: SimOp,
    pub len: usize,
}

struct Pipe {
    data: VecDeque<u8>,
    /// (end position, visible-at) per accepted write, in order.
    releases: VecDeque<(u64, Instant)>,
    written: u64,
    delivered: u64,
    rng: Option<ChaCha8Rng>,
    next_boundary: u64,
    writer_closed: bool,
    reader_closed: bool,
    broken: bool,
    fault: Option<(u64, FaultKind)>,
    stall_at: Option<u64>,
    pacing: Instant,
    eof_reported: bool,
}

impl Pipe {
    fn new(rng: Option<ChaCha8Rng>, fault: Option<(u64, FaultKind)>) -> Self {
        let mut p = Pipe {
            data: VecDeque::new(),
            releases: VecDeque::new(),
            written: 0,
            delivered: 0,
            rng,
            next_boundary: u64::MAX,
            writer_closed: false,
            reader_closed: false,
            broken: false,
            fault,
            stall_at: None,
            pacing: Instant::now(),
            eof_reported: false,
        };
        p.next_boundary = p.draw_boundary(0);
        p
    }

    fn draw_boundary(&mut self, from: u64) -> u64 {
        match &mut self.rng {
            None => u64::MAX,
            Some(rng) => {
                let len = if rng.gen_ratio(1, 4) {
                    rng.gen_range(1..=16)
                } else {
                    rng.gen_range(17..=8192)
                };
                from + len
            }
        }
    }

    /// End position of bytes the reader may see at `now`.
    fn visible_end(&self, now: Instant) -> u64 {
        let mut end = self.delivered;
        for &(pos, at) in &self.releases {
            if at <= now {
                end = pos;
            } else {
                break;
            }
        }
        match self.stall_at {
            Some(s) => end.min(s),
            None => end,
        }
    }

    fn next_release_after(&self, now: Instant) -> Option<Instant> {
        self.releases.iter().map(|&(_, at)| at).find(|&at| at > now)
    }

    fn at_eof(&self) -> bool {
        (self.writer_closed || self.broken)
            && self.stall_at.is_none()
            && self.delivered == self.written
    }

    fn free(&self, capacity: usize) -> usize {
        capacity.saturating_sub(self.data.len())
    }
}

struct NetState {
    pipes: Vec<Pipe>,
    trace: Vec<SimTraceEntry>,
    hash: u64,
}

impl NetState {
    fn record(&mut self, keep: bool, entry: SimTraceEntry) {
        // FNV-1a over the entry fields.
        let words = [
            entry.channel as u64,
            entry.direction as u64,
            entry.op as u64,
            entry.len as u64,
        ];
        for w in words {
            for b in w.to_le_bytes() {
                self.hash ^= b as u64;
                self.hash = self.hash.wrapping_mul(0x100000001b3);
            }
        }
        if keep {
            self.trace.push(entry);
        }
    }
}

struct Shared {
    cfg: SimNetConfig,
    state: Mutex<NetState>,
    cond: Condvar,
}

/// Handle on one simulated network; all streams from a [`sim_pair`] share it.
#[derive(Clone)]
pub struct NetHandle(Arc<Shared>);

pub type SimNet = NetHandle;

impl NetHandle {
    pub(crate) fn same(&self, other: &NetHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn notify(&self) {
        let _g = self.lock();
        self.0.cond.notify_all();
    }

    fn lock(&self) -> MutexGuard<'_, NetState> {
        self.0.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Recorded delivery events (empty unless `record_trace` is set).
    pub fn trace(&self) -> Vec<SimTraceEntry> {
        self.lock().trace.clone()
    }

    pub fn trace_hash(&self) -> u64 {
        self.lock().hash
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.0.cfg
    }

    pub(crate) fn poll(
        &self,
        streams: &[&ChannelStream],
        interest: &[Interest],
        waker: Option<&Waker>,
        deadline: Instant,
    ) -> (Vec<Readiness>, bool) {
        let mut st = self.lock();
        loop {
            let now = Instant::now();
            let mut any = false;
            let mut wake_at = deadline;
            let report: Vec<Readiness> = streams
                .iter()
                .zip(interest)
                .map(|(s, &i)| {
                    let sim = s.sim().expect("simulated stream");
                    let r = sim.readiness_locked(&st, i, now, &self.0.cfg);
                    any |= r.any();
                    if i.read {
                        if let Some(at) = st.pipes[sim.in_pipe()].next_release_after(now) {
                            wake_at = wake_at.min(at);
                        }
                    }
                    r
                })
                .collect();
            let woke = waker.is_some_and(|w| w.take());
            if any || woke || now >= deadline {
                return (report, woke);
            }
            let (g, _) = self
                .0
                .cond
                .wait_timeout(st, wake_at.saturating_duration_since(now))
                .unwrap_or_else(|p| p.into_inner());
            st = g;
        }
    }
}

impl fmt::Debug for NetHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimNet").field("cfg", &self.0.cfg).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Client,
    Server,
}

pub(crate) struct SimStream {
    net: NetHandle,
    channel: usize,
    side: Side,
    closed: bool,
}

impl SimStream {
    fn out_pipe(&self) -> usize {
        self.channel * 2
            + match self.side {
                Side::Client => 0,
                Side::Server => 1,
            }
    }

    pub(crate) fn in_pipe(&self) -> usize {
        self.channel * 2
            + match self.side {
                Side::Client => 1,
                Side::Server => 0,
            }
    }

    fn direction_of(&self, pipe: usize) -> SimDirection {
        if pipe.is_multiple_of(2) {
            SimDirection::ClientToServer
        } else {
            SimDirection::ServerToClient
        }
    }

    pub(crate) fn net(&self) -> NetHandle {
        self.net.clone()
    }

    pub(crate) fn capacity(&self) -> usize {
        self.net.0.cfg.buffer_capacity
    }

    pub(crate) fn label(&self) -> String {
        format!(
            "sim:{}:{}",
            self.channel,
            match self.side {
                Side::Client => "client",
                Side::Server => "server",
            }
        )
    }

    fn readiness_locked(
        &self,
        st: &NetState,
        interest: Interest,
        now: Instant,
        cfg: &SimNetConfig,
    ) -> Readiness {
        let inp = &st.pipes[self.in_pipe()];
        let out = &st.pipes[self.out_pipe()];
        let readable = interest.read && (inp.visible_end(now) > inp.delivered || inp.at_eof());
        let broken_out = out.broken || out.reader_closed || out.writer_closed;
        let writable = interest.write && (broken_out || out.free(cfg.buffer_capacity) > 0);
        Readiness {
            readable,
            writable,
            hangup: inp.broken || out.broken || out.reader_closed,
        }
    }

    pub(crate) fn readiness(&self, interest: Interest) -> Readiness {
        let st = self.net.lock();
        self.readiness_locked(&st, interest, Instant::now(), &self.net.0.cfg)
    }

    pub(crate) fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let keep = self.net.0.cfg.record_trace;
        let idx = self.in_pipe();
        let dir = self.direction_of(idx);
        let mut st = self.net.lock();
        let now = Instant::now();
        let pipe = &mut st.pipes[idx];
        let avail = pipe.visible_end(now) - pipe.delivered;
        if avail == 0 {
            if pipe.at_eof() {
                let first = !pipe.eof_reported;
                pipe.eof_reported = true;
                if first {
                    st.record(
                        keep,
                        SimTraceEntry {
                            channel: self.channel,
                            direction: dir,
                            op: SimOp::Eof,
                            len: 0,
                        },
                    );
                }
                return Ok(0);
            }
            return Err(io::ErrorKind::WouldBlock.into());
        }
        let to_boundary = pipe.next_boundary - pipe.delivered;
        let n = (buf.len() as u64).min(avail).min(to_boundary) as usize;
        let (a, b) = pipe.data.as_slices();
        if n <= a.len() {
            buf[..n].copy_from_slice(&a[..n]);
        } else {
            buf[..a.len()].copy_from_slice(a);
            buf[a.len()..n].copy_from_slice(&b[..n - a.len()]);
        }
        pipe.data.drain(..n);
        pipe.delivered += n as u64;
        while pipe
            .releases
            .front()
            .is_some_and(|&(end, _)| end <= pipe.delivered)
        {
            pipe.releases.pop_front();
        }
        if pipe.delivered == pipe.next_boundary {
            let from = pipe.delivered;
            pipe.next_boundary = pipe.draw_boundary(from);
        }
        st.record(
            keep,
            SimTraceEntry {
                channel: self.channel,
                direction: dir,
                op: SimOp::Read,
                len: n,
            },
        );
        self.net.0.cond.notify_all();
        Ok(n)
    }

    pub(crate) fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.write_vectored(&[IoSlice::new(buf)])
    }

    pub(crate) fn write_vectored(&mut self, bufs: &[IoSlice<'_>]) -> io::Result<usize> {
        let total: usize = bufs.iter().map(|b| b.len()).sum();
        if total == 0 {
            return Ok(0);
        }
        let cfg = &self.net.0.cfg;
        let keep = cfg.record_trace;
        let idx = self.out_pipe();
        let dir = self.direction_of(idx);
        let channel = self.channel;
        let mut st = self.net.lock();
        {
            let pipe = &st.pipes[idx];
            if pipe.broken || pipe.reader_closed || pipe.writer_closed {
                return Err(io::ErrorKind::BrokenPipe.into());
            }
        }
        let free = st.pipes[idx].free(cfg.buffer_capacity);
        if free == 0 {
            return Err(io::ErrorKind::WouldBlock.into());
        }
        let mut accept = total.min(free);
        let mut cut = false;
        if let Some((pos, kind)) = st.pipes[idx].fault {
            let written = st.pipes[idx].written;
            if written + accept as u64 >= pos {
                match kind {
                    FaultKind::Close => {
                        accept = (pos - written) as usize;
                        cut = true;
                    }
                    FaultKind::Stall => {
                        st.pipes[idx].stall_at = Some(pos);
                    }
                }
                st.pipes[idx].fault = None;
            }
        }

        let now = Instant::now();
        let pipe = &mut st.pipes[idx];
        let mut left = accept;
        for b in bufs {
            if left == 0 {
                break;
            }
            let take = left.min(b.len());
            pipe.data.extend(&b[..take]);
            left -= take;
        }
        pipe.written += accept as u64;
        if accept > 0 {
            let visible = match cfg.bandwidth_cap {
                Some(bps) if bps > 0 => {
                    let start = pipe.pacing.max(now);
                    let secs = accept as f64 / bps as f64;
                    pipe.pacing = start + Duration::from_secs_f64(secs);
                    pipe.pacing + cfg.per_channel_latency
                }
                _ => now + cfg.per_channel_latency,
            };
            let end = pipe.written;
            pipe.releases.push_back((end, visible));
            st.record(
                keep,
                SimTraceEntry {
                    channel,
                    direction: dir,
                    op: SimOp::Write,
                    len: accept,
                },
            );
        }
        if cut {
            st.pipes[channel * 2].broken = true;
            st.pipes[channel * 2 + 1].broken = true;
            st.record(
                keep,
                SimTraceEntry {
                    channel,
                    direction: dir,
                    op: SimOp::Fault,
                    len: 0,
                },
            );
            self.net.0.cond.notify_all();
            // The bytes past the cut were "sent" and lost in the network.
            return Ok(total.min(free));
        }
        self.net.0.cond.notify_all();
        Ok(accept)
    }

    pub(crate) fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        let (out, inp) = (self.out_pipe(), self.in_pipe());
        let mut st = self.net.lock();
        st.pipes[out].writer_closed = true;
        st.pipes[inp].reader_closed = true;
        // Unread inbound bytes are discarded, as a socket close would.
        st.pipes[inp].data.clear();
        st.pipes[inp].releases.clear();
        let w = st.pipes[inp].written;
        st.pipes[inp].delivered = w;
        self.net.0.cond.notify_all();
    }
}

/// Build `n` connected channels: (client ends, server ends), index-aligned.
pub fn sim_pair(cfg: SimNetConfig, n: usize) -> (Vec<ChannelStream>, Vec<ChannelStream>) {
    let (_, c, s) = sim_net(cfg, n);
    (c, s)
}

/// Like [`sim_pair`] but also returns the network handle for trace access.
pub fn sim_net(cfg: SimNetConfig, n: usize) -> (NetHandle, Vec<ChannelStream>, Vec<ChannelStream>) {
    assert!(n >= 1, "sim_pair needs at least one channel");
    let pipes = (0..n * 2)
        .map(|idx| {
            let rng = match cfg.fragmentation {
                Fragmentation::None => None,
                Fragmentation::RandomSplit => Some(ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )),
            };
            let channel = idx / 2;
            let dir = if idx % 2 == 0 {
                SimDirection::ClientToServer
            } else {
                SimDirection::ServerToClient
            };
            let fault = cfg
                .fault_plan
                .iter()
                .find(|f| f.channel == channel && f.direction == dir)
                .map(|f| (f.position, f.kind));
            Pipe::new(rng, fault)
        })
        .collect();
    let net = NetHandle(Arc::new(Shared {
        cfg,
        state: Mutex::new(NetState {
            pipes,
            trace: Vec::new(),
            hash: 0xcbf29ce484222325,
        }),
        cond: Condvar::new(),
    }));
    let mk = |channel, side| {
        ChannelStream::new(Backend::Sim(SimStream {
            net: net.clone(),
            channel,
            side,
            closed: false,
        }))
    };
    let clients = (0..n).map(|i| mk(i, Side::Client)).collect();
    let servers = (0..n).map(|i| mk(i, Side::Server)).collect();
    (net, clients, servers)
}

/// The simulated network behind `stream`, if any.
pub fn net_of(stream: &ChannelStream) -> Option<NetHandle> {
    stream.sim().map(|s| s.net())
}
