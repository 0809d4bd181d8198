use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{self, IoSlice};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::fsm::{
    AckLifecycle, FsmAction, FsmEvent, FsmTrace, Machine, MachineContext, TraceEntry,
};
use crate::storage::{Completion, DiskEngine, EngineStats, ReadOutcome, WriteOutcome, WriteRequest};
use crate::transport::{poll_with_waker, ChannelStream, Interest, Waker};
use crate::wire::{
    self, BlockDescriptor, ChannelHeader, FrameLen, NegotiationRequest, CHANNEL_HEADER_LEN,
};

/// The two readiness lists. A channel is on at most one of them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DispatchLists {
    read: BTreeMap<u16, AckLifecycle>,
    write: BTreeSet<u16>,
}

impl DispatchLists {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_list(&self) -> impl Iterator<Item = (u16, AckLifecycle)> + '_ {
        self.read.iter().map(|(&i, &l)| (i, l))
    }

    pub fn write_list(&self) -> impl Iterator<Item = u16> + '_ {
        self.write.iter().copied()
    }

    pub fn in_write(&self, channel: u16) -> bool {
        self.write.contains(&channel)
    }

    pub fn lifecycle(&self, channel: u16) -> Option<AckLifecycle> {
        self.read.get(&channel).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.read.is_empty() && self.write.is_empty()
    }

    pub fn is_disjoint(&self) -> bool {
        !self.read.keys().any(|k| self.write.contains(k))
    }

    /// Apply a list movement; other actions are ignored.
    pub fn apply(&mut self, action: &FsmAction) {
        match action {
            FsmAction::MoveToReadList { channel, lifecycle } => {
                self.write.remove(channel);
                self.read.insert(*channel, *lifecycle);
            }
            FsmAction::MoveToWriteList(i) => {
                self.read.remove(i);
                self.write.insert(*i);
            }
            FsmAction::CloseChannel(i) => {
                self.read.remove(i);
                self.write.remove(i);
            }
            FsmAction::CloseSession => {
                self.read.clear();
                self.write.clear();
            }
            _ => {}
        }
        debug_assert!(self.is_disjoint());
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChannelCounters {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub blocks_sent: u64,
    pub blocks_received: u64,
    pub acks: u64,
}

/// Progress of one session, as seen by its dispatcher.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TransferCounters {
    pub channels: Vec<ChannelCounters>,
    /// File bytes moved: sent by a sender, written by a receiver.
    pub payload_bytes: u64,
    pub blocks: u64,
    pub acks: u64,
    pub iterations: u64,
    pub repositionings: u64,
}

impl TransferCounters {
    fn new(n: usize) -> Self {
        TransferCounters {
            channels: vec![ChannelCounters::default(); n],
            ..Default::default()
        }
    }

    pub fn bytes_on_wire(&self) -> u64 {
        self.channels
            .iter()
            .map(|c| c.bytes_sent + c.bytes_received)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct DispatchConfig {
    /// Give up when nothing moves for this long.
    pub idle_timeout: Duration,
    /// How long queued output may take to drain once the session closes.
    pub close_grace: Duration,
    /// Upper bound on one readiness wait; the watchdog runs at this pace.
    pub poll_interval: Duration,
    /// Refuse block headers longer than this.
    pub max_block: u64,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            idle_timeout: Duration::from_secs(60),
            close_grace: Duration::from_secs(5),
            poll_interval: Duration::from_millis(200),
            max_block: wire::MAX_BLOCK_SIZE,
        }
    }
}

/// How a session ended.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub machine: Machine,
    pub ctx: MachineContext,
    pub trace: FsmTrace,
    pub counters: TransferCounters,
    pub error: Option<String>,
    pub engine: Option<Arc<EngineStats>>,
}

impl SessionOutcome {
    pub fn succeeded(&self) -> bool {
        self.machine.is_terminated() && self.error.is_none()
    }
}

enum Parser {
    /// Receiver side: channel headers, each maybe followed by a payload.
    Headers {
        head: Vec<u8>,
        body: Option<(ChannelHeader, Vec<u8>, usize)>,
    },
    /// Sender side: exception frames.
    Exceptions { buf: Vec<u8> },
}

struct Chan {
    stream: Option<ChannelStream>,
    /// Queued frames; the flag marks block payloads, which go back to the
    /// engine's buffer pool once sent.
    out: VecDeque<(Vec<u8>, bool)>,
    /// Bytes of `out.front()` already written.
    sent: usize,
    parser: Parser,
    peer_closed: bool,
    close_after_flush: bool,
}

impl Chan {
    fn open(&self) -> bool {
        self.stream.is_some()
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::UnexpectedEof
            | io::ErrorKind::NotConnected
    )
}

/// One session's event loop: owns its streams, its machine and its disk
/// engine, and runs on exactly one thread.
pub struct Dispatcher {
    chans: Vec<Chan>,
    machine: Machine,
    ctx: MachineContext,
    engine: Option<DiskEngine>,
    lists: DispatchLists,
    events: VecDeque<FsmEvent>,
    /// Block payloads waiting for their action, keyed by offset.
    payloads: HashMap<u64, Vec<u8>>,
    backlog: VecDeque<WriteRequest>,
    trace: FsmTrace,
    counters: TransferCounters,
    published: Option<Arc<Mutex<TransferCounters>>>,
    waker: Waker,
    cfg: DispatchConfig,
    closing: Option<Instant>,
    last_progress: Instant,
    error: Option<String>,
    finished: bool,
}

impl Dispatcher {
    /// `machine` may still be in its registration front; feed
    /// [`Dispatcher::register`] before running.
    pub fn new(
        streams: Vec<ChannelStream>,
        machine: Machine,
        ctx: MachineContext,
        engine: DiskEngine,
        waker: Waker,
        cfg: DispatchConfig,
    ) -> Self {
        assert_eq!(streams.len(), ctx.n as usize, "one stream per channel");
        let sender = machine.kind().is_sender();
        let chans = streams
            .into_iter()
            .map(|s| Chan {
                stream: Some(s),
                out: VecDeque::new(),
                sent: 0,
                parser: if sender {
                    Parser::Exceptions { buf: Vec::new() }
                } else {
                    Parser::Headers {
                        head: Vec::with_capacity(CHANNEL_HEADER_LEN),
                        body: None,
                    }
                },
                peer_closed: false,
                close_after_flush: false,
            })
            .collect::<Vec<_>>();
        let n = chans.len();
        Dispatcher {
            chans,
            machine,
            ctx,
            engine: Some(engine),
            lists: DispatchLists::new(),
            events: VecDeque::new(),
            payloads: HashMap::new(),
            backlog: VecDeque::new(),
            trace: FsmTrace::new(),
            counters: TransferCounters::new(n),
            published: None,
            waker,
            cfg,
            closing: None,
            last_progress: Instant::now(),
            error: None,
            finished: false,
        }
    }

    /// Mirror counters into `sink` as the session progresses.
    pub fn publish_to(&mut self, sink: Arc<Mutex<TransferCounters>>) {
        self.published = Some(sink);
    }

    pub fn machine(&self) -> Machine {
        self.machine
    }

    pub fn lists(&self) -> &DispatchLists {
        &self.lists
    }

    pub fn counters(&self) -> &TransferCounters {
        &self.counters
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Replay registration: every channel connects and presents its
    /// request, in index order.
    pub fn register(&mut self, requests: &[NegotiationRequest]) {
        let mut reqs: Vec<&NegotiationRequest> = requests.iter().collect();
        reqs.sort_by_key(|r| r.channel_index);
        for r in reqs {
            self.events
                .push_back(FsmEvent::ChannelConnected(r.channel_index));
            self.events
                .push_back(FsmEvent::NegotiationReceived(r.clone()));
        }
        self.drain_events();
    }

    /// Abort from outside (shutdown); the machine sees a local error.
    pub fn abort(&mut self, why: &str) {
        if !self.machine.is_absorbing() {
            self.events.push_back(FsmEvent::LocalError(why.to_string()));
            self.drain_events();
        }
    }

    /// Run until the session ends.
    pub fn run(mut self) -> SessionOutcome {
        while !self.finished {
            let t = self.cfg.poll_interval;
            self.turn(t);
        }
        self.into_outcome()
    }

    /// One loop iteration, waiting at most `timeout` for readiness.
    /// Returns whether the session has ended.
    pub fn turn(&mut self, timeout: Duration) -> bool {
        if self.finished {
            return true;
        }
        self.counters.iterations += 1;
        self.drain_events();
        self.collect_completions();
        self.submit_backlog();
        self.flush_all();
        self.drain_events();
        if self.try_finish() {
            return true;
        }

        // Readiness wait over the open channels.
        let idx: Vec<usize> = (0..self.chans.len())
            .filter(|&i| self.chans[i].open())
            .collect();
        let reading = self.backlog.is_empty() && self.closing.is_none();
        let interest: Vec<Interest> = idx
            .iter()
            .map(|&i| {
                let c = &self.chans[i];
                let want_ready = self.lists.in_write(i as u16) && c.out.is_empty();
                Interest {
                    read: reading && !c.peer_closed,
                    write: !c.out.is_empty() || want_ready,
                }
            })
            .collect();
        let wait = if self.events.is_empty() {
            timeout
        } else {
            Duration::ZERO
        };
        let streams: Vec<&ChannelStream> = idx
            .iter()
            .map(|&i| self.chans[i].stream.as_ref().unwrap())
            .collect();
        let polled = if streams.is_empty() {
            poll_with_waker(&[], &[], Some(&self.waker), wait)
        } else {
            poll_with_waker(&streams, &interest, Some(&self.waker), wait)
        };
        drop(streams);
        let report = match polled {
            Ok((r, _)) => r,
            Err(e) => {
                self.fail(format!("readiness wait failed: {e}"));
                return self.try_finish();
            }
        };

        for (k, &i) in idx.iter().enumerate() {
            let r = report[k];
            if r.readable || r.hangup {
                self.read_channel(i);
            }
        }
        for (k, &i) in idx.iter().enumerate() {
            if report[k].writable {
                self.flush(i);
                let c = &self.chans[i];
                if c.open() && c.out.is_empty() && self.lists.in_write(i as u16) {
                    self.events.push_back(FsmEvent::WriteReady(i as u16));
                }
            }
        }
        self.collect_completions();
        self.drain_events();

        if self.last_progress.elapsed() >= self.cfg.idle_timeout {
            let why = format!("no progress for {:?}", self.cfg.idle_timeout);
            if self.closing.is_some() {
                self.close_all();
            } else {
                self.fail(why);
            }
        }
        self.publish();
        self.try_finish()
    }

    fn progress(&mut self) {
        self.last_progress = Instant::now();
    }

    fn fail(&mut self, why: String) {
        if self.error.is_none() {
            self.error = Some(why.clone());
        }
        if !self.machine.is_absorbing() {
            self.events.push_back(FsmEvent::LocalError(why));
        }
        self.drain_events();
    }

    /// Step the machine through every queued event.
    fn drain_events(&mut self) {
        loop {
            if self.machine.is_absorbing() {
                self.events.clear();
                return;
            }
            if self.ctx.needs_end_of_file() {
                self.step(FsmEvent::EndOfFile);
                continue;
            }
            let Some(ev) = self.events.pop_front() else {
                return;
            };
            // Readiness may be stale by the time the event is reached.
            if let FsmEvent::WriteReady(i) = ev {
                let c = &self.chans[i as usize];
                if !(self.lists.in_write(i) && c.open() && c.out.is_empty()) {
                    continue;
                }
            }
            self.step(ev);
        }
    }

    fn step(&mut self, ev: FsmEvent) {
        match self.machine.step(&self.ctx, &ev) {
            Ok(s) => {
                self.trace.push(TraceEntry {
                    before: self.machine,
                    event: ev,
                    actions: s.actions.clone(),
                    after: s.state,
                });
                self.machine = s.state;
                self.ctx = s.ctx;
                self.progress();
                for a in &s.actions {
                    self.execute(a);
                }
            }
            Err(e) => {
                let why = e.to_string();
                if self.error.is_none() {
                    self.error = Some(why.clone());
                }
                // Feeding the error through the machine lands it in Error.
                self.events.push_front(FsmEvent::LocalError(why));
            }
        }
        if self.machine.is_error() && self.error.is_none() {
            self.error = Some(format!("session ended in error after {}", self.last_event()));
        }
    }

    fn last_event(&self) -> String {
        self.trace
            .entries
            .last()
            .map(|e| e.event.to_string())
            .unwrap_or_default()
    }

    fn execute(&mut self, action: &FsmAction) {
        self.lists.apply(action);
        match action {
            FsmAction::SendHeader { channel, header } => {
                if let Ok(bytes) = wire::encode_channel_header(header) {
                    self.enqueue(*channel, bytes.to_vec());
                }
            }
            FsmAction::SendBlockPayload { channel, block } => {
                let Some(data) = self.payloads.remove(&block.offset) else {
                    self.fail(format!("no payload read for block {block}"));
                    return;
                };
                let event = self.ctx.kind.direction().mode_event();
                let header = ChannelHeader::block(event, *block);
                let bytes = wire::encode_channel_header(&header).expect("valid block header");
                let c = &mut self.counters.channels[*channel as usize];
                c.blocks_sent += 1;
                self.counters.blocks += 1;
                self.counters.payload_bytes += data.len() as u64;
                self.enqueue(*channel, bytes.to_vec());
                self.enqueue_as(*channel, data, true);
            }
            FsmAction::SendException { channel, exception } => {
                match wire::encode_exception(exception) {
                    Ok(bytes) => self.enqueue(*channel, bytes),
                    Err(e) => self.fail(format!("cannot encode exception: {e}")),
                }
            }
            FsmAction::ReadBlockFromDisk(d) => self.read_disk(*d),
            FsmAction::WriteBlockToDisk { block, .. } => {
                let Some(data) = self.payloads.remove(&block.offset) else {
                    self.fail(format!("no payload received for block {block}"));
                    return;
                };
                match WriteRequest::new(block.offset, data) {
                    Ok(w) => {
                        self.backlog.push_back(w);
                        self.submit_backlog();
                    }
                    Err(e) => self.fail(e.to_string()),
                }
            }
            FsmAction::BroadcastEof(event) => {
                let bytes = wire::encode_channel_header(&ChannelHeader::bare(*event))
                    .expect("bare header");
                for i in 0..self.chans.len() {
                    if self.chans[i].open() {
                        self.enqueue(i as u16, bytes.to_vec());
                    }
                }
            }
            FsmAction::CloseChannel(i) => {
                self.chans[*i as usize].close_after_flush = true;
                self.flush(*i as usize);
            }
            FsmAction::CloseSession => {
                self.closing = Some(Instant::now() + self.cfg.close_grace);
            }
            FsmAction::MoveToReadList { .. } | FsmAction::MoveToWriteList(_) => {}
        }
    }

    fn enqueue(&mut self, channel: u16, bytes: Vec<u8>) {
        self.enqueue_as(channel, bytes, false);
    }

    fn enqueue_as(&mut self, channel: u16, bytes: Vec<u8>, payload: bool) {
        let c = &mut self.chans[channel as usize];
        if c.open() {
            c.out.push_back((bytes, payload));
        }
    }

    fn read_disk(&mut self, d: BlockDescriptor) {
        let engine = self.engine.as_mut().expect("engine present while running");
        match engine.read_block(d) {
            Ok(ReadOutcome::Ready(buf)) => {
                self.payloads.insert(d.offset, buf);
                self.events.push_back(FsmEvent::BlockIoDone(d));
            }
            Ok(ReadOutcome::Pending) => {}
            Err(e) => self.fail(format!("read {d}: {e}")),
        }
    }

    fn submit_backlog(&mut self) {
        while let Some(w) = self.backlog.pop_front() {
            let d = BlockDescriptor {
                offset: w.offset,
                length: w.data.len() as u32,
            };
            let engine = self.engine.as_mut().expect("engine present while running");
            match engine.write_block(w) {
                Ok(WriteOutcome::Done(buf)) => {
                    engine.recycle(buf);
                    self.counters.payload_bytes += d.length as u64;
                    self.events.push_back(FsmEvent::BlockIoDone(d));
                }
                Ok(WriteOutcome::Queued) => {}
                Ok(WriteOutcome::Full(w)) => {
                    self.backlog.push_front(w);
                    return;
                }
                Err(e) => {
                    self.fail(format!("write {d}: {e}"));
                    return;
                }
            }
        }
    }

    fn collect_completions(&mut self) {
        let Some(engine) = self.engine.as_mut() else {
            return;
        };
        for c in engine.poll_completions() {
            match c {
                Completion::Read { block, data } => {
                    self.payloads.insert(block.offset, data);
                    self.events.push_back(FsmEvent::BlockIoDone(block));
                }
                Completion::Written { block, buffer } => {
                    engine.recycle(buffer);
                    self.counters.payload_bytes += block.length as u64;
                    self.events.push_back(FsmEvent::BlockIoDone(block));
                }
                Completion::Failed(e) => {
                    let why = format!("disk: {e}");
                    self.error.get_or_insert(why.clone());
                    self.events.push_back(FsmEvent::LocalError(why));
                }
            }
        }
    }

    fn flush_all(&mut self) {
        for i in 0..self.chans.len() {
            self.flush(i);
        }
    }

    /// Write as much queued output as the stream takes without blocking.
    fn flush(&mut self, i: usize) {
        let c = &mut self.chans[i];
        let Some(stream) = c.stream.as_mut() else {
            c.out.clear();
            return;
        };
        let mut moved = 0u64;
        let mut broken = false;
        while !c.out.is_empty() {
            let res = {
                let first = &c.out[0].0[c.sent..];
                match c.out.get(1).map(|(b, _)| b) {
                    Some(second) => {
                        stream.write_vectored(&[IoSlice::new(first), IoSlice::new(second)])
                    }
                    None => stream.write(first),
                }
            };
            match res {
                Ok(0) => {
                    broken = true;
                    break;
                }
                Ok(mut n) => {
                    moved += n as u64;
                    while n > 0 {
                        let left = c.out[0].0.len() - c.sent;
                        if n >= left {
                            n -= left;
                            c.sent = 0;
                            let (done, payload) = c.out.pop_front().unwrap();
                            if let (true, Some(engine)) = (payload, self.engine.as_mut()) {
                                engine.recycle(done);
                            }
                        } else {
                            c.sent += n;
                            n = 0;
                        }
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if is_disconnect(&e) => {
                    broken = true;
                    break;
                }
                Err(e) => {
                    let why = format!("channel {i}: send failed: {e}");
                    c.out.clear();
                    self.error.get_or_insert(why.clone());
                    self.events.push_back(FsmEvent::LocalError(why));
                    return;
                }
            }
        }
        if moved > 0 {
            self.counters.channels[i].bytes_sent += moved;
            self.last_progress = Instant::now();
        }
        let c = &mut self.chans[i];
        if broken {
            c.out.clear();
            c.sent = 0;
            if !c.peer_closed {
                c.peer_closed = true;
                self.events.push_back(FsmEvent::PeerClosed(i as u16));
            }
        }
        if c.close_after_flush && c.out.is_empty() {
            if let Some(mut s) = c.stream.take() {
                s.shutdown();
            }
        }
    }

    /// Pull everything currently readable from channel `i` through its parser.
    fn read_channel(&mut self, i: usize) {
        let max_block = self.cfg.max_block;
        let data_event = self.ctx.kind.direction().mode_event();
        let mut moved = 0u64;
        let mut frames: Vec<FsmEvent> = Vec::new();
        let mut payloads: Vec<(u64, Vec<u8>)> = Vec::new();
        let mut eof = false;
        let mut bad: Option<String> = None;
        {
            let mut engine = self.engine.as_mut();
            let c = &mut self.chans[i];
            let Some(stream) = c.stream.as_mut() else {
                return;
            };
            // Bounded per turn so one busy channel cannot starve the rest.
            let mut budget = 64usize;
            'outer: while budget > 0 {
                budget -= 1;
                match &mut c.parser {
                    Parser::Headers { head, body } => {
                        if let Some((h, buf, filled)) = body {
                            match stream.read(&mut buf[*filled..]) {
                                Ok(0) => {
                                    eof = true;
                                    break;
                                }
                                Ok(n) => {
                                    moved += n as u64;
                                    *filled += n;
                                    if *filled == buf.len() {
                                        let h = *h;
                                        let d = h.block.expect("block header");
                                        let data = std::mem::take(buf);
                                        *body = None;
                                        if h.event == data_event {
                                            payloads.push((d.offset, data));
                                        }
                                        frames.push(FsmEvent::HeaderReceived(i as u16, h));
                                    }
                                }
                                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                                Err(e) if is_disconnect(&e) => {
                                    eof = true;
                                    break;
                                }
                                Err(e) => {
                                    bad = Some(format!("channel {i}: receive failed: {e}"));
                                    break;
                                }
                            }
                            continue;
                        }
                        let have = head.len();
                        let mut tmp = [0u8; CHANNEL_HEADER_LEN];
                        match stream.read(&mut tmp[..CHANNEL_HEADER_LEN - have]) {
                            Ok(0) => {
                                eof = true;
                                break;
                            }
                            Ok(n) => {
                                moved += n as u64;
                                head.extend_from_slice(&tmp[..n]);
                                if head.len() < CHANNEL_HEADER_LEN {
                                    continue;
                                }
                                let decoded = wire::decode_channel_header(head);
                                head.clear();
                                match decoded {
                                    Ok(h) => match h.block {
                                        Some(d) if h.event.carries_block() => {
                                            if d.length as u64 > max_block {
                                                bad = Some(format!(
                                                    "channel {i}: block {d} exceeds {max_block}"
                                                ));
                                                break 'outer;
                                            }
                                            let mut buf = match engine.as_deref_mut() {
                                                Some(e) => e.take_buffer(),
                                                None => Vec::new(),
                                            };
                                            buf.resize(d.length as usize, 0);
                                            *body = Some((h, buf, 0));
                                        }
                                        _ => frames.push(FsmEvent::HeaderReceived(i as u16, h)),
                                    },
                                    Err(e) => {
                                        bad = Some(format!("channel {i}: bad header: {e}"));
                                        break;
                                    }
                                }
                            }
                            Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                            Err(e) if is_disconnect(&e) => {
                                eof = true;
                                break;
                            }
                            Err(e) => {
                                bad = Some(format!("channel {i}: receive failed: {e}"));
                                break;
                            }
                        }
                    }
                    Parser::Exceptions { buf } => {
                        let missing = match wire::exception_frame_len(buf) {
                            Ok(FrameLen::Complete(_)) => {
                                match wire::decode_exception(buf) {
                                    Ok(e) => frames.push(FsmEvent::ExceptionReceived(i as u16, e)),
                                    Err(e) => {
                                        bad = Some(format!("channel {i}: bad exception: {e}"));
                                        break;
                                    }
                                }
                                buf.clear();
                                continue;
                            }
                            Ok(FrameLen::Incomplete(m)) => m,
                            Err(e) => {
                                bad = Some(format!("channel {i}: bad exception: {e}"));
                                break;
                            }
                        };
                        let start = buf.len();
                        buf.resize(start + missing, 0);
                        match stream.read(&mut buf[start..]) {
                            Ok(0) => {
                                buf.truncate(start);
                                eof = true;
                                break;
                            }
                            Ok(n) => {
                                moved += n as u64;
                                buf.truncate(start + n);
                            }
                            Err(e) => {
                                buf.truncate(start);
                                match e.kind() {
                                    io::ErrorKind::WouldBlock => break,
                                    io::ErrorKind::Interrupted => {}
                                    _ if is_disconnect(&e) => {
                                        eof = true;
                                        break;
                                    }
                                    _ => {
                                        bad = Some(format!("channel {i}: receive failed: {e}"));
                                        break;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if moved > 0 {
            let cc = &mut self.counters.channels[i];
            cc.bytes_received += moved;
            self.last_progress = Instant::now();
        }
        for (offset, data) in payloads {
            self.counters.channels[i].blocks_received += 1;
            self.payloads.insert(offset, data);
        }
        for f in frames {
            if matches!(&f, FsmEvent::ExceptionReceived(_, e) if e.is_ok()) {
                self.counters.channels[i].acks += 1;
                self.counters.acks += 1;
            }
            self.events.push_back(f);
        }
        if let Some(why) = bad {
            self.error.get_or_insert(why.clone());
            self.events.push_back(FsmEvent::LocalError(why));
        }
        if eof && !self.chans[i].peer_closed {
            self.chans[i].peer_closed = true;
            self.events.push_back(FsmEvent::PeerClosed(i as u16));
        }
    }

    fn close_all(&mut self) {
        for c in &mut self.chans {
            c.out.clear();
            if let Some(mut s) = c.stream.take() {
                s.shutdown();
            }
        }
    }

    /// Once the machine stopped: drain output within the grace period,
    /// then close every stream.
    fn try_finish(&mut self) -> bool {
        if self.finished {
            return true;
        }
        if !self.machine.is_absorbing() {
            return false;
        }
        let deadline = *self
            .closing
            .get_or_insert_with(|| Instant::now() + self.cfg.close_grace);
        self.flush_all();
        let drained = self.chans.iter().all(|c| c.out.is_empty() || !c.open());
        if drained || Instant::now() >= deadline {
            self.close_all();
            self.finished = true;
            self.publish();
        }
        self.finished
    }

    fn publish(&mut self) {
        if let Some(engine) = &self.engine {
            self.counters.repositionings = engine.stats().repositionings();
        }
        if let Some(sink) = &self.published {
            *sink.lock().unwrap_or_else(|p| p.into_inner()) = self.counters.clone();
        }
    }

    /// Stop the engine and report. Call after the loop finished.
    pub fn into_outcome(mut self) -> SessionOutcome {
        self.close_all();
        let mut engine_stats = None;
        if let Some(engine) = self.engine.take() {
            match engine.finish() {
                Ok(stats) => {
                    self.counters.repositionings = stats.repositionings();
                    engine_stats = Some(stats);
                }
                Err(e) => {
                    self.error.get_or_insert(format!("disk: {e}"));
                }
            }
        }
        if self.machine.is_error() && self.error.is_none() {
            self.error = Some("session ended in error".into());
        }
        if !self.machine.is_absorbing() && self.error.is_none() {
            self.error = Some(format!("session stopped in {}", self.machine));
        }
        self.publish();
        SessionOutcome {
            machine: self.machine,
            ctx: self.ctx,
            trace: self.trace,
            counters: self.counters,
            error: self.error,
            engine: engine_stats,
        }
    }
}

/// Run a registered session to its end on the calling thread.
pub fn run_session(
    streams: Vec<ChannelStream>,
    machine: Machine,
    ctx: MachineContext,
    requests: &[NegotiationRequest],
    engine: DiskEngine,
    waker: Waker,
    cfg: DispatchConfig,
) -> SessionOutcome {
    let mut d = Dispatcher::new(streams, machine, ctx, engine, waker, cfg);
    d.register(requests);
    d.run()
}

/// Drive two dispatchers connected to each other from one thread,
/// alternating turns without waiting. With simulated streams and
/// synchronous engines the result is fully deterministic.
pub fn co_run(
    mut a: Dispatcher,
    mut b: Dispatcher,
    max_turns: usize,
) -> (SessionOutcome, SessionOutcome) {
    let mut turns = 0;
    while !(a.is_finished() && b.is_finished()) {
        turns += 1;
        if turns > max_turns {
            a.abort("turn budget exhausted");
            b.abort("turn budget exhausted");
            a.close_all();
            b.close_all();
            break;
        }
        a.turn(Duration::ZERO);
        b.turn(Duration::ZERO);
    }
    (a.into_outcome(), b.into_outcome())
}

#[cfg(test)]
mod tests {
    use std::io::Write as _;

    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    use super::*;
    use crate::fsm::harness::request;
    use crate::fsm::MachineKind;
    use crate::storage::{open_stream, StreamMode};
    use crate::transport::{sim_pair, FaultKind, Fragmentation, SimDirection, SimFault, SimNetConfig};
    use crate::wire::{ChannelEvent, Direction, SessionId};

    struct Run {
        sender: SessionOutcome,
        receiver: SessionOutcome,
        src: Vec<u8>,
        dst: Vec<u8>,
    }

    fn download(n: u16, size: usize, bs: u64, net: SimNetConfig) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let mut src = vec![0u8; size];
        ChaCha8Rng::seed_from_u64(size as u64).fill_bytes(&mut src);
        let src_path = dir.path().join("src.bin");
        std::fs::File::create(&src_path).unwrap().write_all(&src).unwrap();
        let dst_path = dir.path().join("dst.bin");

        let (clients, servers) = sim_pair(net, n as usize);
        let reqs: Vec<_> = (0..n)
            .map(|i| request(SessionId([1; 16]), Direction::Download, i, n, bs))
            .collect();
        let waker = Waker::new().unwrap();
        let cfg = DispatchConfig {
            idle_timeout: Duration::from_secs(10),
            ..Default::default()
        };

        let skind = MachineKind::ServerDownload;
        let rs = open_stream(src_path.to_str().unwrap(), StreamMode::Read).unwrap();
        let mut tx = Dispatcher::new(
            servers,
            Machine::start(skind),
            MachineContext::sender(skind, n, size as u64, bs),
            DiskEngine::sync(rs),
            waker.clone(),
            cfg.clone(),
        );
        tx.register(&reqs);

        let ckind = MachineKind::ClientDownload;
        let mut ws = open_stream(dst_path.to_str().unwrap(), StreamMode::WriteCreate).unwrap();
        ws.set_len(size as u64).unwrap();
        let mut rx = Dispatcher::new(
            clients,
            Machine::start(ckind),
            MachineContext::receiver(ckind, n, Some(size as u64)),
            DiskEngine::sync(ws),
            Waker::new().unwrap(),
            cfg,
        );
        rx.register(&reqs);

        let (sender, receiver) = co_run(tx, rx, 1_000_000);
        let dst = std::fs::read(&dst_path).unwrap();
        Run {
            sender,
            receiver,
            src,
            dst,
        }
    }

    fn sha(b: &[u8]) -> Vec<u8> {
        Sha256::digest(b).to_vec()
    }

    #[test]
    fn three_blocks_one_channel() {
        let run = download(1, 3 * 4096, 4096, SimNetConfig::default());
        assert!(run.sender.succeeded(), "{:?}", run.sender.error);
        assert!(run.receiver.succeeded(), "{:?}", run.receiver.error);
        let sends = run
            .sender
            .trace
            .actions()
            .filter(|a| matches!(a, FsmAction::SendBlockPayload { .. }))
            .count();
        let eofs = run
            .sender
            .trace
            .actions()
            .filter(|a| matches!(a, FsmAction::BroadcastEof(ChannelEvent::Eoft)))
            .count();
        assert_eq!(sends, 3);
        assert_eq!(run.sender.counters.acks, 3);
        assert_eq!(eofs, 1);
        assert_eq!(run.dst, run.src);
    }

    #[test]
    fn hundred_blocks_four_channels_fragmented() {
        let net = SimNetConfig {
            seed: 42,
            fragmentation: Fragmentation::RandomSplit,
            ..Default::default()
        };
        let run = download(4, 100 * 4096, 4096, net);
        assert!(run.receiver.succeeded(), "{:?}", run.receiver.error);
        assert!(run.sender.succeeded(), "{:?}", run.sender.error);
        assert_eq!(sha(&run.dst), sha(&run.src));
        // Demand-driven assignment spreads homogeneous channels evenly.
        let per: Vec<u64> = run
            .sender
            .counters
            .channels
            .iter()
            .map(|c| c.blocks_sent)
            .collect();
        assert_eq!(per.iter().sum::<u64>(), 100);
    }

    #[test]
    fn empty_file_completes() {
        let run = download(3, 0, 4096, SimNetConfig::default());
        assert!(run.sender.succeeded() && run.receiver.succeeded());
        assert!(run.dst.is_empty());
    }

    #[test]
    fn closed_channel_ends_both_sides_in_error() {
        let net = SimNetConfig {
            fault_plan: vec![SimFault {
                channel: 2,
                direction: SimDirection::ServerToClient,
                position: 40_000,
                kind: FaultKind::Close,
            }],
            ..Default::default()
        };
        let run = download(4, 100 * 4096, 4096, net);
        assert!(run.sender.machine.is_error(), "{}", run.sender.machine);
        assert!(run.receiver.machine.is_error(), "{}", run.receiver.machine);
        assert!(run.receiver.error.is_some());
    }

    #[test]
    fn lists_stay_disjoint() {
        let mut l = DispatchLists::new();
        l.apply(&FsmAction::MoveToWriteList(0));
        l.apply(&FsmAction::MoveToReadList {
            channel: 0,
            lifecycle: AckLifecycle::FirstTime,
        });
        assert!(!l.in_write(0));
        assert_eq!(l.lifecycle(0), Some(AckLifecycle::FirstTime));
        l.apply(&FsmAction::CloseSession);
        assert!(l.is_empty());
    }
}
