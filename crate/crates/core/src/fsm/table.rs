//! Hand-written transition tables, one per machine, and the duality check
//! between the sender and receiver halves of opposite modes.

use std::collections::BTreeSet;
use std::fmt;

use super::{FsmAction, Loc, MachineKind, TraceEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionKind {
    SendHeader,
    SendBlockPayload,
    SendException,
    ReadBlockFromDisk,
    WriteBlockToDisk,
    MoveToReadList,
    MoveToWriteList,
    BroadcastEof,
    CloseChannel,
    CloseSession,
}

/// One row: in any of `from`, on `event` when `guard` holds, go to `to`
/// (`"="` keeps the state), emitting actions drawn from `emits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub from: Vec<&'static str>,
    pub event: String,
    pub guard: &'static str,
    pub to: &'static str,
    pub emits: Vec<ActionKind>,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] --{}{}--> {} {:?}",
            self.from.join("|"),
            self.event,
            if self.guard.is_empty() {
                String::new()
            } else {
                format!(" [{}]", self.guard)
            },
            self.to,
            self.emits
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionTable {
    pub machine: MachineKind,
    pub rules: Vec<Rule>,
}

impl TransitionTable {
    /// The first rule that explains a recorded transition, if any. Observed
    /// actions must all be of kinds the rule may emit.
    pub fn explain(&self, entry: &TraceEntry) -> Option<&Rule> {
        let before = entry.before.name();
        let after = entry.after.name();
        let label = entry.event.label();
        let kinds: BTreeSet<ActionKind> = entry.actions.iter().map(FsmAction::kind).collect();
        self.rules.iter().find(|r| {
            r.event == label
                && r.from.contains(&before)
                && (if r.to == "=" { after == before } else { r.to == after })
                && kinds.iter().all(|k| r.emits.contains(k))
        })
    }
}

/// Renames applied to the first table before comparing with the second.
#[derive(Debug, Clone, Default)]
pub struct DualityMapping {
    pub states: Vec<(&'static str, &'static str)>,
    pub events: Vec<(String, String)>,
}

impl DualityMapping {
    pub fn identity() -> Self {
        Self::default()
    }

    /// The fixed correspondence between the data planes of opposite modes:
    /// server-download with client-upload (both send) and server-upload
    /// with client-download (both receive).
    pub fn between(a: MachineKind, b: MachineKind) -> Option<Self> {
        use MachineKind::*;
        let ready = |x: MachineKind| if x.is_server() { "ChannelsReady" } else { "AllChannelsUp" };
        let ok = a.is_sender() == b.is_sender() && a.is_server() != b.is_server() && a.direction() != b.direction();
        if !ok {
            return None;
        }
        let mut m = DualityMapping {
            states: vec![(ready(a), ready(b))],
            events: Vec::new(),
        };
        if matches!((a, b), (ServerUpload, ClientDownload) | (ClientDownload, ServerUpload)) {
            let (da, db) = if a == ServerUpload {
                ("XFTSMU", "XFTSM")
            } else {
                ("XFTSM", "XFTSMU")
            };
            m.events.push((format!("HeaderReceived:{da}"), format!("HeaderReceived:{db}")));
            m.events.push((format!("HeaderReceived:{db}"), format!("HeaderReceived:{da}")));
        }
        Some(m)
    }

    fn state(&self, s: &'static str) -> &'static str {
        self.states.iter().find(|(a, _)| *a == s).map_or(s, |(_, b)| b)
    }

    fn event(&self, e: &str) -> String {
        self.events
            .iter()
            .find(|(a, _)| a == e)
            .map_or_else(|| e.to_string(), |(_, b)| b.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DualityReport {
    /// Data-plane rules compared from each side.
    pub compared: usize,
    pub mismatches: Vec<String>,
}

impl DualityReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

const FRONT: &[&str] = &[
    "Connect",
    "Authenticate",
    "ReceiveParams",
    "SessionLookup",
    "RegisterChannel",
    "SendRequest",
];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Normal {
    from: BTreeSet<&'static str>,
    event: String,
    guard: &'static str,
    to: &'static str,
    emits: BTreeSet<ActionKind>,
}

impl fmt::Display for Normal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let from: Vec<_> = self.from.iter().copied().collect();
        write!(
            f,
            "[{}] --{} [{}]--> {} {:?}",
            from.join("|"),
            self.event,
            self.guard,
            self.to,
            self.emits
        )
    }
}

fn data_plane(t: &TransitionTable, map: Option<&DualityMapping>) -> Vec<Normal> {
    t.rules
        .iter()
        .filter(|r| r.event != "ChannelConnected" && r.event != "NegotiationReceived")
        .filter_map(|r| {
            let from: BTreeSet<&'static str> = r
                .from
                .iter()
                .copied()
                .filter(|s| !FRONT.contains(s))
                .map(|s| map.map_or(s, |m| m.state(s)))
                .collect();
            if from.is_empty() {
                return None;
            }
            Some(Normal {
                from,
                event: map.map_or_else(|| r.event.clone(), |m| m.event(&r.event)),
                guard: r.guard,
                to: map.map_or(r.to, |m| m.state(r.to)),
                emits: r.emits.iter().copied().collect(),
            })
        })
        .collect()
}

/// Compare the data-plane rules of `a` (renamed through `mapping`) with
/// those of `b`. Every rule must have exactly one partner.
pub fn check_duality(
    a: &TransitionTable,
    b: &TransitionTable,
    mapping: &DualityMapping,
) -> DualityReport {
    let left = data_plane(a, Some(mapping));
    let right = data_plane(b, None);
    let mut used = vec![false; right.len()];
    let mut report = DualityReport {
        compared: left.len() + right.len(),
        mismatches: Vec::new(),
    };
    for l in &left {
        match right
            .iter()
            .enumerate()
            .find(|(j, r)| !used[*j] && *r == l)
        {
            Some((j, _)) => used[j] = true,
            None => report
                .mismatches
                .push(format!("{} only in {}: {l}", a.machine, a.machine)),
        }
    }
    for (j, r) in right.iter().enumerate() {
        if !used[j] {
            report
                .mismatches
                .push(format!("{} only in {}: {r}", b.machine, b.machine));
        }
    }
    report
}

fn rule(
    from: &[&'static str],
    event: &str,
    guard: &'static str,
    to: &'static str,
    emits: &[ActionKind],
) -> Rule {
    Rule {
        from: from.to_vec(),
        event: event.to_string(),
        guard,
        to,
        emits: emits.to_vec(),
    }
}

fn all_live(kind: MachineKind) -> Vec<&'static str> {
    kind.state_names()
        .into_iter()
        .filter(|s| *s != "Terminate" && *s != "Error")
        .collect()
}

/// Rules every machine shares: failures end the session, pure readiness
/// and disk wake-ups change nothing.
fn control(kind: MachineKind) -> Vec<Rule> {
    use ActionKind::*;
    let live = all_live(kind);
    vec![
        rule(&live, "LocalError", "", "Error", &[CloseSession]),
        rule(&live, "ExceptionReceived:Error", "", "Error", &[CloseSession]),
        rule(&live, "ReadReady", "", "=", &[]),
        rule(&live, "DiskReady", "", "=", &[]),
    ]
}

fn server_front(entry: ActionKind) -> Vec<Rule> {
    vec![
        rule(&["Authenticate"], "ChannelConnected", "", "ReceiveParams", &[]),
        rule(&["RegisterChannel"], "ChannelConnected", "", "SessionLookup", &[]),
        rule(
            &["ReceiveParams", "SessionLookup"],
            "NegotiationReceived",
            "channels missing",
            "RegisterChannel",
            &[],
        ),
        rule(
            &["ReceiveParams", "SessionLookup"],
            "NegotiationReceived",
            "last channel",
            "ChannelsReady",
            &[entry],
        ),
    ]
}

fn client_front(entry: ActionKind) -> Vec<Rule> {
    vec![
        rule(&["Connect", "SendRequest"], "ChannelConnected", "", "Authenticate", &[]),
        rule(
            &["Authenticate"],
            "NegotiationReceived",
            "channels missing",
            "SendRequest",
            &[],
        ),
        rule(
            &["Authenticate"],
            "NegotiationReceived",
            "last channel",
            "AllChannelsUp",
            &[entry],
        ),
    ]
}

fn server_download() -> TransitionTable {
    use ActionKind::*;
    const A: &[&str] = &["ChannelsReady", "Dispatch", "SendBlocks", "MarkAwaitAck", "CollectAcks"];
    const D: &[&str] = &["EofCheck", "DrainSendBuffers"];
    const E: &[&str] = &["SendEofHeaders"];
    const BEFORE_EOFT: &[&str] = &[
        "Authenticate", "ReceiveParams", "SessionLookup", "RegisterChannel", "ChannelsReady",
        "Dispatch", "SendBlocks", "MarkAwaitAck", "CollectAcks", "EofCheck", "DrainSendBuffers",
    ];
    const DATA: &[&str] = &[
        "ChannelsReady", "Dispatch", "SendBlocks", "MarkAwaitAck", "CollectAcks", "EofCheck",
        "DrainSendBuffers", "SendEofHeaders",
    ];
    let mut rules = server_front(MoveToWriteList);
    rules.extend([
        rule(A, "WriteReady", "block issued", "SendBlocks", &[ReadBlockFromDisk, MoveToReadList]),
        rule(A, "WriteReady", "file exhausted", "Dispatch", &[]),
        rule(A, "BlockIoDone", "", "MarkAwaitAck", &[SendBlockPayload, MoveToReadList]),
        rule(A, "ExceptionReceived:Ok", "before eof", "Dispatch", &[MoveToWriteList]),
        rule(A, "ExceptionReceived:Ok", "acks outstanding", "CollectAcks", &[]),
        rule(A, "ExceptionReceived:Ok", "last ack", "EofCheck", &[MoveToWriteList]),
        rule(A, "EndOfFile", "acks outstanding", "CollectAcks", &[MoveToReadList]),
        rule(A, "EndOfFile", "nothing outstanding", "EofCheck", &[MoveToWriteList]),
        rule(D, "WriteReady", "channels left", "DrainSendBuffers", &[MoveToReadList]),
        rule(
            D,
            "WriteReady",
            "all drained",
            "SendEofHeaders",
            &[MoveToReadList, BroadcastEof, MoveToWriteList],
        ),
        rule(E, "WriteReady", "channels left", "SendEofHeaders", &[MoveToReadList]),
        rule(E, "WriteReady", "all finished", "Terminate", &[MoveToReadList, CloseSession]),
        rule(E, "PeerClosed", "channels left", "SendEofHeaders", &[CloseChannel]),
        rule(E, "PeerClosed", "all finished", "Terminate", &[CloseChannel, CloseSession]),
        rule(E, "PeerClosed", "already finished", "=", &[]),
        rule(BEFORE_EOFT, "PeerClosed", "", "Error", &[CloseSession]),
        rule(DATA, "HeaderReceived:NOOP", "", "=", &[]),
    ]);
    rules.extend(control(MachineKind::ServerDownload));
    TransitionTable {
        machine: MachineKind::ServerDownload,
        rules,
    }
}

fn client_upload() -> TransitionTable {
    use ActionKind::*;
    const A: &[&str] = &["AllChannelsUp", "Dispatch", "SendBlocks", "MarkAwaitAck", "CollectAcks"];
    const D: &[&str] = &["EofCheck", "DrainSendBuffers"];
    const E: &[&str] = &["SendEofHeaders"];
    const BEFORE_EOFT: &[&str] = &[
        "Connect", "Authenticate", "SendRequest", "AllChannelsUp", "Dispatch", "SendBlocks",
        "MarkAwaitAck", "CollectAcks", "EofCheck", "DrainSendBuffers",
    ];
    const DATA: &[&str] = &[
        "AllChannelsUp", "Dispatch", "SendBlocks", "MarkAwaitAck", "CollectAcks", "EofCheck",
        "DrainSendBuffers", "SendEofHeaders",
    ];
    let mut rules = client_front(MoveToWriteList);
    rules.extend([
        rule(A, "WriteReady", "block issued", "SendBlocks", &[ReadBlockFromDisk, MoveToReadList]),
        rule(A, "WriteReady", "file exhausted", "Dispatch", &[]),
        rule(A, "BlockIoDone", "", "MarkAwaitAck", &[SendBlockPayload, MoveToReadList]),
        rule(A, "ExceptionReceived:Ok", "before eof", "Dispatch", &[MoveToWriteList]),
        rule(A, "ExceptionReceived:Ok", "acks outstanding", "CollectAcks", &[]),
        rule(A, "ExceptionReceived:Ok", "last ack", "EofCheck", &[MoveToWriteList]),
        rule(A, "EndOfFile", "acks outstanding", "CollectAcks", &[MoveToReadList]),
        rule(A, "EndOfFile", "nothing outstanding", "EofCheck", &[MoveToWriteList]),
        rule(D, "WriteReady", "channels left", "DrainSendBuffers", &[MoveToReadList]),
        rule(
            D,
            "WriteReady",
            "all drained",
            "SendEofHeaders",
            &[MoveToReadList, BroadcastEof, MoveToWriteList],
        ),
        rule(E, "WriteReady", "channels left", "SendEofHeaders", &[MoveToReadList]),
        rule(E, "WriteReady", "all finished", "Terminate", &[MoveToReadList, CloseSession]),
        rule(E, "PeerClosed", "channels left", "SendEofHeaders", &[CloseChannel]),
        rule(E, "PeerClosed", "all finished", "Terminate", &[CloseChannel, CloseSession]),
        rule(E, "PeerClosed", "already finished", "=", &[]),
        rule(BEFORE_EOFT, "PeerClosed", "", "Error", &[CloseSession]),
        rule(DATA, "HeaderReceived:NOOP", "", "=", &[]),
    ]);
    rules.extend(control(MachineKind::ClientUpload));
    TransitionTable {
        machine: MachineKind::ClientUpload,
        rules,
    }
}

fn client_download() -> TransitionTable {
    use ActionKind::*;
    const R: &[&str] = &["AllChannelsUp", "Dispatch", "WriteBlocks", "CheckEof"];
    const ANY: &[&str] = &[
        "Connect", "Authenticate", "SendRequest", "AllChannelsUp", "Dispatch", "WriteBlocks",
        "CheckEof",
    ];
    let mut rules = client_front(MoveToReadList);
    rules.extend([
        rule(R, "HeaderReceived:XFTSM", "block accepted", "WriteBlocks", &[WriteBlockToDisk]),
        rule(R, "HeaderReceived:XFTSM", "block rejected", "Error", &[SendException, CloseSession]),
        rule(R, "HeaderReceived:XFTSMU", "wrong mode", "Error", &[SendException, CloseSession]),
        rule(R, "HeaderReceived:EOFT", "channels left", "CheckEof", &[]),
        rule(R, "HeaderReceived:EOFT", "file complete", "Terminate", &[CloseSession]),
        rule(R, "HeaderReceived:EOFT", "file incomplete", "Error", &[CloseSession]),
        rule(R, "HeaderReceived:EOFR", "", "=", &[]),
        rule(R, "HeaderReceived:XPATHM", "", "=", &[SendException]),
        rule(R, "HeaderReceived:ZXDFS", "", "=", &[SendException]),
        rule(R, "HeaderReceived:NOOP", "", "=", &[]),
        rule(R, "HeaderReceived:CONM", "", "=", &[]),
        rule(R, "BlockIoDone", "before eof", "Dispatch", &[SendException]),
        rule(R, "BlockIoDone", "eof pending", "CheckEof", &[SendException]),
        rule(R, "BlockIoDone", "file complete", "Terminate", &[SendException, CloseSession]),
        rule(R, "BlockIoDone", "file incomplete", "Error", &[SendException, CloseSession]),
        rule(R, "PeerClosed", "after eoft", "=", &[]),
        rule(ANY, "PeerClosed", "before eoft", "Error", &[CloseSession]),
    ]);
    rules.extend(control(MachineKind::ClientDownload));
    TransitionTable {
        machine: MachineKind::ClientDownload,
        rules,
    }
}

fn server_upload() -> TransitionTable {
    use ActionKind::*;
    const R: &[&str] = &["ChannelsReady", "Dispatch", "WriteBlocks", "CheckEof"];
    const ANY: &[&str] = &[
        "Authenticate", "ReceiveParams", "SessionLookup", "RegisterChannel", "ChannelsReady",
        "Dispatch", "WriteBlocks", "CheckEof",
    ];
    let mut rules = server_front(MoveToReadList);
    rules.extend([
        rule(R, "HeaderReceived:XFTSMU", "block accepted", "WriteBlocks", &[WriteBlockToDisk]),
        rule(R, "HeaderReceived:XFTSMU", "block rejected", "Error", &[SendException, CloseSession]),
        rule(R, "HeaderReceived:XFTSM", "wrong mode", "Error", &[SendException, CloseSession]),
        rule(R, "HeaderReceived:EOFT", "channels left", "CheckEof", &[]),
        rule(R, "HeaderReceived:EOFT", "file complete", "Terminate", &[CloseSession]),
        rule(R, "HeaderReceived:EOFT", "file incomplete", "Error", &[CloseSession]),
        rule(R, "HeaderReceived:EOFR", "", "=", &[]),
        rule(R, "HeaderReceived:XPATHM", "", "=", &[SendException]),
        rule(R, "HeaderReceived:ZXDFS", "", "=", &[SendException]),
        rule(R, "HeaderReceived:NOOP", "", "=", &[]),
        rule(R, "HeaderReceived:CONM", "", "=", &[]),
        rule(R, "BlockIoDone", "before eof", "Dispatch", &[SendException]),
        rule(R, "BlockIoDone", "eof pending", "CheckEof", &[SendException]),
        rule(R, "BlockIoDone", "file complete", "Terminate", &[SendException, CloseSession]),
        rule(R, "BlockIoDone", "file incomplete", "Error", &[SendException, CloseSession]),
        rule(R, "PeerClosed", "after eoft", "=", &[]),
        rule(ANY, "PeerClosed", "before eoft", "Error", &[CloseSession]),
    ]);
    rules.extend(control(MachineKind::ServerUpload));
    TransitionTable {
        machine: MachineKind::ServerUpload,
        rules,
    }
}

pub fn table_for(kind: MachineKind) -> TransitionTable {
    match kind {
        MachineKind::ServerDownload => server_download(),
        MachineKind::ClientDownload => client_download(),
        MachineKind::ServerUpload => server_upload(),
        MachineKind::ClientUpload => client_upload(),
    }
}

// Keep the front-state list in step with the machines.
#[allow(dead_code)]
fn front_matches_loc() -> bool {
    FRONT.iter().all(|name| {
        [
            Loc::Connect,
            Loc::Authenticate,
            Loc::ReceiveParams,
            Loc::SessionLookup,
            Loc::RegisterChannel,
            Loc::SendRequest,
        ]
        .iter()
        .any(|l| super::plane::loc_name(*l) == *name && l.is_front())
    })
}
