//! Runs a sender machine against a receiver machine over idealized FIFO
//! channels, with a seeded random choice of which pending event fires next.
//! No bytes move; only the machines' decisions are exercised. Useful for
//! conformance and coverage properties that should hold for every
//! interleaving, independent of any transport.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AckLifecycle, FsmAction, FsmError, FsmEvent, FsmTrace, Machine, MachineContext, MachineKind,
    TraceEntry,
};
use crate::wire::{
    BlockDescriptor, ChannelEvent, ChannelHeader, Direction, ExceptionHeader, NegotiationRequest,
    ProtocolVersion, SessionId,
};

#[derive(Debug, Clone)]
pub struct PairConfig {
    pub direction: Direction,
    pub n: u16,
    pub file_size: u64,
    pub block_size: u64,
    pub seed: u64,
    /// Give the receiver the file size up front (as a download does).
    pub receiver_knows_size: bool,
}

impl PairConfig {
    pub fn new(direction: Direction, n: u16, file_size: u64, block_size: u64, seed: u64) -> Self {
        PairConfig {
            direction,
            n,
            file_size,
            block_size,
            seed,
            receiver_knows_size: direction == Direction::Download,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub sender: Machine,
    pub receiver: Machine,
    pub sender_trace: FsmTrace,
    pub receiver_trace: FsmTrace,
    /// Blocks in the order the sender put them on the wire.
    pub sent: Vec<(u16, BlockDescriptor)>,
    /// Blocks in the order the receiver asked the disk to write them.
    pub written: Vec<(u16, BlockDescriptor)>,
    /// Ok acks the sender consumed.
    pub acks: u64,
    /// Every per-channel lifecycle change the sender made.
    pub lifecycle_moves: Vec<(u16, AckLifecycle, AckLifecycle)>,
    /// A list held a channel twice, or a step was refused.
    pub violations: Vec<String>,
}

impl PairOutcome {
    pub fn completed(&self) -> bool {
        self.sender.is_terminated() && self.receiver.is_terminated()
    }
}

pub fn request(
    session: SessionId,
    direction: Direction,
    index: u16,
    n: u16,
    block_size: u64,
) -> NegotiationRequest {
    NegotiationRequest {
        protocol_version: ProtocolVersion::CURRENT,
        session_id: session,
        direction,
        channel_index: index,
        channel_count: n,
        local_file_name: "local.bin".into(),
        remote_file_name: "remote.bin".into(),
        tcp_window_size: 1 << 20,
        block_size,
        credentials: Vec::new(),
        extended_mode: BTreeMap::new(),
    }
}

struct Side {
    state: Machine,
    ctx: MachineContext,
    trace: FsmTrace,
    inbox: Vec<VecDeque<FsmEvent>>,
    disk: Vec<BlockDescriptor>,
    read_list: BTreeMap<u16, AckLifecycle>,
    write_list: BTreeSet<u16>,
    closed: BTreeSet<u16>,
    session_closed: bool,
    moves: Vec<(u16, AckLifecycle, AckLifecycle)>,
}

impl Side {
    fn new(kind: MachineKind, ctx: MachineContext, n: u16) -> Self {
        Side {
            state: Machine::start(kind),
            ctx,
            trace: FsmTrace::new(),
            inbox: vec![VecDeque::new(); n as usize],
            disk: Vec::new(),
            read_list: BTreeMap::new(),
            write_list: BTreeSet::new(),
            closed: BTreeSet::new(),
            session_closed: false,
            moves: Vec::new(),
        }
    }

    fn feed(&mut self, ev: FsmEvent) -> Result<Vec<FsmAction>, FsmError> {
        let step = self.state.step(&self.ctx, &ev)?;
        if let (Some(a), Some(b)) = (self.ctx.sender_ctx(), step.ctx.sender_ctx()) {
            for (i, (x, y)) in a.lifecycle.iter().zip(&b.lifecycle).enumerate() {
                if x != y {
                    self.moves.push((i as u16, *x, *y));
                }
            }
        }
        self.trace.push(TraceEntry {
            before: self.state,
            event: ev,
            actions: step.actions.clone(),
            after: step.state,
        });
        self.state = step.state;
        self.ctx = step.ctx;
        Ok(step.actions)
    }
}

/// Run one transfer to completion (or deadlock) and report what happened.
pub fn run_pair(cfg: &PairConfig) -> PairOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let session = SessionId(rng.gen());
    let server = MachineKind::for_role(true, cfg.direction);
    let client = MachineKind::for_role(false, cfg.direction);
    let (sender_kind, receiver_kind) = if server.is_sender() {
        (server, client)
    } else {
        (client, server)
    };
    let rx_size = cfg.receiver_knows_size.then_some(cfg.file_size);
    let mut tx = Side::new(
        sender_kind,
        MachineContext::sender(sender_kind, n, cfg.file_size, cfg.block_size),
        n,
    );
    let mut rx = Side::new(receiver_kind, MachineContext::receiver(receiver_kind, n, rx_size), n);
    let mut out = PairOutcome {
        sender: tx.state,
        receiver: rx.state,
        sender_trace: FsmTrace::new(),
        receiver_trace: FsmTrace::new(),
        sent: Vec::new(),
        written: Vec::new(),
        acks: 0,
        lifecycle_moves: Vec::new(),
        violations: Vec::new(),
    };

    // Registration: each side sees every channel connect and negotiate, in
    // an arrival order of its own.
    for side in [&mut tx, &mut rx] {
        let mut order: Vec<u16> = (0..n).collect();
        order.shuffle(&mut rng);
        for i in order {
            let evs = [
                FsmEvent::ChannelConnected(i),
                FsmEvent::NegotiationReceived(request(session, cfg.direction, i, n, cfg.block_size)),
            ];
            for ev in evs {
                match side.feed(ev) {
                    Ok(actions) => apply_lists(side, &actions, &mut out),
                    Err(e) => out.violations.push(e.to_string()),
                }
            }
        }
    }

    let data_event = cfg.direction.mode_event();
    let mut steps = 0usize;
    loop {
        steps += 1;
        if steps > 1_000_000 {
            out.violations.push("step budget exhausted".into());
            break;
        }
        if tx.ctx.needs_end_of_file() && !tx.state.is_absorbing() {
            let actions = tx.feed(FsmEvent::EndOfFile);
            match actions {
                Ok(a) => sender_actions(&mut tx, &mut rx, &a, &mut out, data_event),
                Err(e) => out.violations.push(e.to_string()),
            }
            continue;
        }
        // Candidate events: (true = sender side, event).
        let mut cands: Vec<(bool, FsmEvent)> = Vec::new();
        if !tx.state.is_absorbing() {
            for &i in &tx.write_list {
                cands.push((true, FsmEvent::WriteReady(i)));
            }
            for d in &tx.disk {
                cands.push((true, FsmEvent::BlockIoDone(*d)));
            }
            for i in 0..n {
                if let Some(ev) = tx.inbox[i as usize].front() {
                    cands.push((true, ev.clone()));
                } else if rx.closed.contains(&i) && !tx.closed.contains(&i) {
                    cands.push((true, FsmEvent::PeerClosed(i)));
                }
            }
        }
        if !rx.state.is_absorbing() {
            for d in &rx.disk {
                cands.push((false, FsmEvent::BlockIoDone(*d)));
            }
            for i in 0..n {
                if let Some(ev) = rx.inbox[i as usize].front() {
                    cands.push((false, ev.clone()));
                } else if tx.closed.contains(&i) && !rx.closed.contains(&i) {
                    cands.push((false, FsmEvent::PeerClosed(i)));
                }
            }
        }
        if cands.is_empty() {
            break;
        }
        let (is_tx, ev) = cands.swap_remove(rng.gen_range(0..cands.len()));
        let side = if is_tx { &mut tx } else { &mut rx };
        match &ev {
            FsmEvent::BlockIoDone(d) => side.disk.retain(|x| x != d),
            FsmEvent::HeaderReceived(i, _) | FsmEvent::ExceptionReceived(i, _) => {
                side.inbox[*i as usize].pop_front();
            }
            FsmEvent::PeerClosed(i) => {
                side.closed.insert(*i);
            }
            _ => {}
        }
        if let FsmEvent::ExceptionReceived(_, e) = &ev {
            if e.is_ok() && is_tx {
                out.acks += 1;
            }
        }
        match side.feed(ev) {
            Ok(actions) => {
                if is_tx {
                    sender_actions(&mut tx, &mut rx, &actions, &mut out, data_event)
                } else {
                    receiver_actions(&mut rx, &mut tx, &actions, &mut out)
                }
            }
            Err(e) => {
                out.violations.push(e.to_string());
                break;
            }
        }
    }

    out.lifecycle_moves = std::mem::take(&mut tx.moves);
    out.sender = tx.state;
    out.receiver = rx.state;
    out.sender_trace = tx.trace;
    out.receiver_trace = rx.trace;
    out
}

fn apply_lists(side: &mut Side, actions: &[FsmAction], out: &mut PairOutcome) {
    for a in actions {
        match a {
            FsmAction::MoveToReadList { channel, lifecycle } => {
                side.write_list.remove(channel);
                side.read_list.insert(*channel, *lifecycle);
            }
            FsmAction::MoveToWriteList(i) => {
                side.read_list.remove(i);
                side.write_list.insert(*i);
            }
            FsmAction::CloseChannel(i) => {
                side.read_list.remove(i);
                side.write_list.remove(i);
                side.closed.insert(*i);
            }
            FsmAction::CloseSession => {
                side.session_closed = true;
                side.read_list.clear();
                side.write_list.clear();
                for i in 0..side.inbox.len() as u16 {
                    side.closed.insert(i);
                }
            }
            _ => {}
        }
    }
    if side.read_list.keys().any(|k| side.write_list.contains(k)) {
        out.violations.push("channel on both dispatch lists".into());
    }
}

fn sender_actions(
    tx: &mut Side,
    rx: &mut Side,
    actions: &[FsmAction],
    out: &mut PairOutcome,
    data_event: ChannelEvent,
) {
    apply_lists(tx, actions, out);
    for a in actions {
        match a {
            FsmAction::ReadBlockFromDisk(d) => tx.disk.push(*d),
            FsmAction::SendBlockPayload { channel, block } => {
                out.sent.push((*channel, *block));
                rx.inbox[*channel as usize].push_back(FsmEvent::HeaderReceived(
                    *channel,
                    ChannelHeader::block(data_event, *block),
                ));
            }
            FsmAction::BroadcastEof(kind) => {
                for (i, q) in rx.inbox.iter_mut().enumerate() {
                    q.push_back(FsmEvent::HeaderReceived(i as u16, ChannelHeader::bare(*kind)));
                }
            }
            FsmAction::SendHeader { channel, header } => {
                rx.inbox[*channel as usize].push_back(FsmEvent::HeaderReceived(*channel, *header))
            }
            FsmAction::SendException { channel, exception } => rx.inbox[*channel as usize]
                .push_back(FsmEvent::ExceptionReceived(*channel, exception.clone())),
            _ => {}
        }
    }
}

fn receiver_actions(rx: &mut Side, tx: &mut Side, actions: &[FsmAction], out: &mut PairOutcome) {
    apply_lists(rx, actions, out);
    for a in actions {
        match a {
            FsmAction::WriteBlockToDisk { channel, block } => {
                out.written.push((*channel, *block));
                rx.disk.push(*block);
            }
            FsmAction::SendException { channel, exception } => tx.inbox[*channel as usize]
                .push_back(FsmEvent::ExceptionReceived(*channel, exception.clone())),
            _ => {}
        }
    }
}

/// An Ok acknowledgment, for tests that drive a sender by hand.
pub fn ok_ack(channel: u16) -> FsmEvent {
    FsmEvent::ExceptionReceived(channel, ExceptionHeader::ok())
}
