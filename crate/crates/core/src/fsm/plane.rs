use super::{
    AckLifecycle, FsmAction, FsmError, FsmEvent, Loc, MachineContext, Plane, ReceiverCtx, Result,
    SenderCtx,
};
use crate::wire::{codes, BlockDescriptor, ChannelEvent, ExceptionHeader, NegotiationRequest};

type Out = (Loc, MachineContext, Vec<FsmAction>);

fn illegal(ctx: &MachineContext, loc: Loc, ev: &FsmEvent, reason: impl Into<String>) -> FsmError {
    FsmError::IllegalTransition {
        machine: ctx.kind,
        state: loc_name(loc),
        event: ev.to_string(),
        reason: reason.into(),
    }
}

pub(crate) fn loc_name(loc: Loc) -> &'static str {
    match loc {
        Loc::Connect => "Connect",
        Loc::Authenticate => "Authenticate",
        Loc::ReceiveParams => "ReceiveParams",
        Loc::SessionLookup => "SessionLookup",
        Loc::RegisterChannel => "RegisterChannel",
        Loc::ChannelsReady => "ChannelsReady",
        Loc::SendRequest => "SendRequest",
        Loc::AllChannelsUp => "AllChannelsUp",
        Loc::Dispatch => "Dispatch",
        Loc::SendBlocks => "SendBlocks",
        Loc::MarkAwaitAck => "MarkAwaitAck",
        Loc::CollectAcks => "CollectAcks",
        Loc::EofCheck => "EofCheck",
        Loc::DrainSendBuffers => "DrainSendBuffers",
        Loc::SendEofHeaders => "SendEofHeaders",
        Loc::WriteBlocks => "WriteBlocks",
        Loc::CheckEof => "CheckEof",
        Loc::Terminate => "Terminate",
        Loc::Error => "Error",
    }
}

pub(crate) fn step(loc: Loc, ctx: &MachineContext, ev: &FsmEvent) -> Result<Out> {
    if loc.is_absorbing() {
        return Err(illegal(ctx, loc, ev, "machine has stopped"));
    }
    let c = ctx.clone();
    match ev {
        FsmEvent::LocalError(_) => return Ok((Loc::Error, c, vec![FsmAction::CloseSession])),
        FsmEvent::ExceptionReceived(_, e) if !e.is_ok() => {
            return Ok((Loc::Error, c, vec![FsmAction::CloseSession]))
        }
        FsmEvent::ReadReady(_) | FsmEvent::DiskReady => return Ok((loc, c, Vec::new())),
        _ => {}
    }
    if let Some(i) = channel_of(ev) {
        if i >= ctx.n {
            return Err(illegal(ctx, loc, ev, format!("channel {i} of {}", ctx.n)));
        }
    }
    if loc.is_front() {
        return front(loc, c, ev);
    }
    match &ctx.plane {
        Plane::Sender(_) => sender(loc, c, ev),
        Plane::Receiver(_) => receiver(loc, c, ev),
    }
}

fn channel_of(ev: &FsmEvent) -> Option<u16> {
    match ev {
        FsmEvent::ChannelConnected(i)
        | FsmEvent::ReadReady(i)
        | FsmEvent::WriteReady(i)
        | FsmEvent::HeaderReceived(i, _)
        | FsmEvent::ExceptionReceived(i, _)
        | FsmEvent::PeerClosed(i) => Some(*i),
        FsmEvent::NegotiationReceived(r) => Some(r.channel_index),
        _ => None,
    }
}

fn front(loc: Loc, mut c: MachineContext, ev: &FsmEvent) -> Result<Out> {
    let server = c.kind.is_server();
    match (loc, ev) {
        (_, FsmEvent::PeerClosed(_)) => Ok((Loc::Error, c, vec![FsmAction::CloseSession])),
        (Loc::Authenticate, FsmEvent::ChannelConnected(i))
        | (Loc::RegisterChannel, FsmEvent::ChannelConnected(i))
            if server =>
        {
            connect(&mut c, loc, ev, *i)?;
            let next = if loc == Loc::Authenticate {
                Loc::ReceiveParams
            } else {
                Loc::SessionLookup
            };
            Ok((next, c, Vec::new()))
        }
        (Loc::Connect, FsmEvent::ChannelConnected(i))
        | (Loc::SendRequest, FsmEvent::ChannelConnected(i))
            if !server =>
        {
            connect(&mut c, loc, ev, *i)?;
            Ok((Loc::Authenticate, c, Vec::new()))
        }
        (Loc::ReceiveParams | Loc::SessionLookup, FsmEvent::NegotiationReceived(req)) if server => {
            join(&mut c, loc, ev, req)?;
            Ok(after_join(c, Loc::RegisterChannel, Loc::ChannelsReady))
        }
        (Loc::Authenticate, FsmEvent::NegotiationReceived(req)) if !server => {
            join(&mut c, loc, ev, req)?;
            Ok(after_join(c, Loc::SendRequest, Loc::AllChannelsUp))
        }
        _ => Err(illegal(&c, loc, ev, "not expected during registration")),
    }
}

fn connect(c: &mut MachineContext, loc: Loc, ev: &FsmEvent, i: u16) -> Result<()> {
    if !c.connected.insert(i) {
        return Err(illegal(c, loc, ev, "channel already connected"));
    }
    Ok(())
}

fn join(c: &mut MachineContext, loc: Loc, ev: &FsmEvent, req: &NegotiationRequest) -> Result<()> {
    let why = if req.channel_count != c.n {
        Some(format!("request names {} channels, session has {}", req.channel_count, c.n))
    } else if req.direction != c.kind.direction() {
        Some(format!("request is {}", req.direction))
    } else if !c.connected.contains(&req.channel_index) {
        Some("channel never connected".to_string())
    } else if c.joined.contains(&req.channel_index) {
        Some("channel already joined".to_string())
    } else if c.session.is_some_and(|s| s != req.session_id) {
        Some(format!("request belongs to session {}", req.session_id))
    } else {
        None
    };
    if let Some(reason) = why {
        return Err(illegal(c, loc, ev, reason));
    }
    c.session = Some(req.session_id);
    c.joined.insert(req.channel_index);
    Ok(())
}

/// Registration finished once all `n` channels joined; enter the data plane
/// with every channel on the list its role starts from.
fn after_join(mut c: MachineContext, more: Loc, ready: Loc) -> Out {
    if c.joined.len() < c.n as usize {
        return (more, c, Vec::new());
    }
    let n = c.n;
    let actions = match &mut c.plane {
        Plane::Sender(s) => (0..n)
            .map(|i| {
                s.in_write.insert(i);
                FsmAction::MoveToWriteList(i)
            })
            .collect(),
        Plane::Receiver(_) => (0..n)
            .map(|i| FsmAction::MoveToReadList {
                channel: i,
                lifecycle: AckLifecycle::FirstTime,
            })
            .collect(),
    };
    (ready, c, actions)
}

fn sender_mut(c: &mut MachineContext) -> &mut SenderCtx {
    match &mut c.plane {
        Plane::Sender(s) => s,
        Plane::Receiver(_) => unreachable!("sender plane on a receiver"),
    }
}

fn receiver_mut(c: &mut MachineContext) -> &mut ReceiverCtx {
    match &mut c.plane {
        Plane::Receiver(r) => r,
        Plane::Sender(_) => unreachable!("receiver plane on a sender"),
    }
}

fn sender(loc: Loc, mut c: MachineContext, ev: &FsmEvent) -> Result<Out> {
    let n = c.n;
    let active = matches!(
        loc,
        Loc::ChannelsReady
            | Loc::AllChannelsUp
            | Loc::Dispatch
            | Loc::SendBlocks
            | Loc::MarkAwaitAck
            | Loc::CollectAcks
    );
    let draining = matches!(loc, Loc::EofCheck | Loc::DrainSendBuffers);
    let s = sender_mut(&mut c);
    let mut acts = Vec::new();
    let next = match ev {
        FsmEvent::WriteReady(i) => {
            let i = *i;
            if !s.in_write.contains(&i) {
                return Err(illegal(&c, loc, ev, "channel is not on the write list"));
            }
            let lc = s.lifecycle[i as usize];
            if active && !s.eof {
                match s.scheduler.assign(i) {
                    Some(d) => {
                        s.reading.insert(d.offset, i);
                        s.in_write.remove(&i);
                        acts.push(FsmAction::ReadBlockFromDisk(d));
                        acts.push(FsmAction::MoveToReadList {
                            channel: i,
                            lifecycle: lc,
                        });
                        Loc::SendBlocks
                    }
                    None if s.scheduler.is_exhausted() => Loc::Dispatch,
                    None => return Err(illegal(&c, loc, ev, "channel already holds a block")),
                }
            } else if draining {
                s.in_write.remove(&i);
                s.drained.insert(i);
                acts.push(FsmAction::MoveToReadList {
                    channel: i,
                    lifecycle: lc,
                });
                if s.drained.len() == n as usize {
                    acts.push(FsmAction::BroadcastEof(ChannelEvent::Eoft));
                    for j in 0..n {
                        s.in_write.insert(j);
                        acts.push(FsmAction::MoveToWriteList(j));
                    }
                    Loc::SendEofHeaders
                } else {
                    Loc::DrainSendBuffers
                }
            } else if loc == Loc::SendEofHeaders {
                s.in_write.remove(&i);
                s.finished.insert(i);
                acts.push(FsmAction::MoveToReadList {
                    channel: i,
                    lifecycle: lc,
                });
                finish_eof(s, n, &mut acts)
            } else {
                return Err(illegal(&c, loc, ev, "no write expected after end of file"));
            }
        }
        FsmEvent::BlockIoDone(d) if active => {
            let Some(i) = s.reading.remove(&d.offset) else {
                return Err(illegal(&c, loc, ev, "no read outstanding at that offset"));
            };
            if s.scheduler.in_flight(i) != Some(*d) {
                return Err(illegal(&c, loc, ev, "descriptor does not match the issued block"));
            }
            let lc = &mut s.lifecycle[i as usize];
            debug_assert!(lc.can_become(AckLifecycle::NotDone));
            *lc = AckLifecycle::NotDone;
            s.blocks_sent += 1;
            acts.push(FsmAction::SendBlockPayload {
                channel: i,
                block: *d,
            });
            acts.push(FsmAction::MoveToReadList {
                channel: i,
                lifecycle: AckLifecycle::NotDone,
            });
            Loc::MarkAwaitAck
        }
        FsmEvent::ExceptionReceived(i, _) if active => {
            let i = *i;
            let sent = s.lifecycle[i as usize] == AckLifecycle::NotDone
                && s.scheduler.in_flight(i).is_some()
                && !s.reading.values().any(|&r| r == i);
            if !sent {
                return Err(illegal(&c, loc, ev, "no block awaiting an ack on this channel"));
            }
            s.scheduler.complete(i);
            s.lifecycle[i as usize] = AckLifecycle::Done;
            s.acks += 1;
            if !s.eof {
                s.in_write.insert(i);
                acts.push(FsmAction::MoveToWriteList(i));
                Loc::Dispatch
            } else if s.scheduler.outstanding() > 0 {
                Loc::CollectAcks
            } else {
                enter_eof_check(s, n, &mut acts)
            }
        }
        FsmEvent::EndOfFile if active => {
            if s.eof {
                return Err(illegal(&c, loc, ev, "end of file already seen"));
            }
            if !s.scheduler.is_exhausted() {
                return Err(illegal(&c, loc, ev, "blocks remain to be issued"));
            }
            s.eof = true;
            if s.scheduler.outstanding() > 0 {
                for j in std::mem::take(&mut s.in_write) {
                    acts.push(FsmAction::MoveToReadList {
                        channel: j,
                        lifecycle: s.lifecycle[j as usize],
                    });
                }
                Loc::CollectAcks
            } else {
                enter_eof_check(s, n, &mut acts)
            }
        }
        FsmEvent::PeerClosed(i) if loc == Loc::SendEofHeaders => {
            // Every block was acknowledged before EOFT went out, so a peer
            // hanging up now has everything it needs.
            if s.finished.insert(*i) {
                s.in_write.remove(i);
                acts.push(FsmAction::CloseChannel(*i));
                finish_eof(s, n, &mut acts)
            } else {
                loc
            }
        }
        FsmEvent::PeerClosed(_) => {
            acts.push(FsmAction::CloseSession);
            Loc::Error
        }
        FsmEvent::HeaderReceived(_, h) if h.event == ChannelEvent::Noop => loc,
        _ => return Err(illegal(&c, loc, ev, "not expected by a sender")),
    };
    Ok((next, c, acts))
}

fn enter_eof_check(s: &mut SenderCtx, n: u16, acts: &mut Vec<FsmAction>) -> Loc {
    for j in 0..n {
        if s.in_write.insert(j) {
            acts.push(FsmAction::MoveToWriteList(j));
        }
    }
    Loc::EofCheck
}

fn finish_eof(s: &SenderCtx, n: u16, acts: &mut Vec<FsmAction>) -> Loc {
    if s.finished.len() == n as usize {
        acts.push(FsmAction::CloseSession);
        Loc::Terminate
    } else {
        Loc::SendEofHeaders
    }
}

fn receiver(loc: Loc, mut c: MachineContext, ev: &FsmEvent) -> Result<Out> {
    let n = c.n as usize;
    let r = receiver_mut(&mut c);
    let mut acts = Vec::new();
    let next = match ev {
        FsmEvent::HeaderReceived(i, h) => {
            let i = *i;
            match h.event {
                e if e == r.data_event => {
                    let d = h.block.unwrap_or(BlockDescriptor { offset: 0, length: 0 });
                    match claim(r, d) {
                        Ok(()) => {
                            r.writing.insert(d.offset, i);
                            acts.push(FsmAction::WriteBlockToDisk { channel: i, block: d });
                            Loc::WriteBlocks
                        }
                        Err(why) => protocol_error(&mut acts, i, why),
                    }
                }
                ChannelEvent::Xftsm | ChannelEvent::XftsmUpload => protocol_error(
                    &mut acts,
                    i,
                    format!("{} block in a {} session", h.event, r.data_event),
                ),
                ChannelEvent::Eoft => {
                    if !r.eoft.insert(i) {
                        return Err(illegal(&c, loc, ev, "second EOFT on one channel"));
                    }
                    if r.eoft.len() == n && r.writing.is_empty() {
                        finalize(r, &mut acts)
                    } else {
                        Loc::CheckEof
                    }
                }
                ChannelEvent::Eofr => {
                    r.reusable.insert(i);
                    loc
                }
                ChannelEvent::XpathM | ChannelEvent::Zxdfs => {
                    acts.push(FsmAction::SendException {
                        channel: i,
                        exception: ExceptionHeader::error(
                            codes::NOT_IMPLEMENTED,
                            format!("{} mode not implemented", h.event),
                        ),
                    });
                    loc
                }
                ChannelEvent::Noop | ChannelEvent::Conm => loc,
            }
        }
        FsmEvent::BlockIoDone(d) => {
            let Some(i) = r.writing.remove(&d.offset) else {
                return Err(illegal(&c, loc, ev, "no write outstanding at that offset"));
            };
            r.bytes_written += d.length as u64;
            r.blocks_written += 1;
            acts.push(FsmAction::SendException {
                channel: i,
                exception: ExceptionHeader::ok(),
            });
            if r.eoft.len() == n && r.writing.is_empty() {
                finalize(r, &mut acts)
            } else if r.eoft.is_empty() {
                Loc::Dispatch
            } else {
                Loc::CheckEof
            }
        }
        FsmEvent::PeerClosed(i) if r.eoft.contains(i) => loc,
        FsmEvent::PeerClosed(_) => {
            acts.push(FsmAction::CloseSession);
            Loc::Error
        }
        _ => return Err(illegal(&c, loc, ev, "not expected by a receiver")),
    };
    Ok((next, c, acts))
}

fn protocol_error(acts: &mut Vec<FsmAction>, channel: u16, why: String) -> Loc {
    acts.push(FsmAction::SendException {
        channel,
        exception: ExceptionHeader::error(codes::PROTOCOL, why),
    });
    acts.push(FsmAction::CloseSession);
    Loc::Error
}

/// Record `d` as accepted, refusing empty, out-of-range or overlapping blocks.
fn claim(r: &mut ReceiverCtx, d: BlockDescriptor) -> std::result::Result<(), String> {
    if d.length == 0 {
        return Err("empty block".into());
    }
    let (start, end) = (d.offset, d.end());
    if let Some(size) = r.file_size {
        if end > size {
            return Err(format!("block {d} beyond file size {size}"));
        }
    }
    let before = r.claimed.range(..=start).next_back().map(|(&a, &b)| (a, b));
    let after = r.claimed.range(start..).next().map(|(&a, &b)| (a, b));
    if before.is_some_and(|(_, b)| b > start) || after.is_some_and(|(a, _)| a < end) {
        return Err(format!("block {d} overlaps data already received"));
    }
    let mut lo = start;
    let mut hi = end;
    if let Some((a, b)) = before {
        if b == start {
            r.claimed.remove(&a);
            lo = a;
        }
    }
    if let Some((a, b)) = after {
        if a == end {
            r.claimed.remove(&a);
            hi = b;
        }
    }
    r.claimed.insert(lo, hi);
    Ok(())
}

/// All channels sent EOFT and every write completed: the session ends well
/// only if what arrived is exactly the file.
fn finalize(r: &ReceiverCtx, acts: &mut Vec<FsmAction>) -> Loc {
    let covered_end = r.claimed.values().next_back().copied().unwrap_or(0);
    let expected = r.file_size.unwrap_or(covered_end);
    let complete = match r.claimed.len() {
        0 => expected == 0,
        1 => r.claimed.get(&0) == Some(&expected),
        _ => false,
    };
    acts.push(FsmAction::CloseSession);
    if complete {
        Loc::Terminate
    } else {
        Loc::Error
    }
}
