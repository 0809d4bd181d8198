//! The four transfer state machines as pure step functions.
//!
//! A machine never touches a socket or a disk. It consumes an [`FsmEvent`],
//! returns its next state, an updated [`MachineContext`] and a list of
//! [`FsmAction`]s for the runtime to carry out. Every machine is a
//! registration front (server) or connection front (client) followed by one
//! of two data planes: the sender plane (read blocks, send them, collect an
//! Exception ack per block, broadcast EOFT) or the receiver plane (write
//! blocks, ack them, stop after EOFT on every channel).

pub mod harness;
mod plane;
mod table;
mod trace;

use std::collections::BTreeSet;
use std::fmt;

use crate::piod::BlockScheduler;
use crate::wire::{
    BlockDescriptor, ChannelEvent, ChannelHeader, Direction, ExceptionHeader, NegotiationRequest,
    SessionId,
};

pub use table::{
    check_duality, table_for, ActionKind, DualityMapping, DualityReport, Rule, TransitionTable,
};
pub use trace::{replay, FsmTrace, TraceEntry};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FsmError {
    #[error("illegal transition: {event} in {machine}/{state}: {reason}")]
    IllegalTransition {
        machine: MachineKind,
        state: &'static str,
        event: String,
        reason: String,
    },
    #[error("context belongs to {actual}, not {expected}")]
    WrongMachine {
        expected: MachineKind,
        actual: MachineKind,
    },
}

pub type Result<T> = std::result::Result<T, FsmError>;

/// Per-channel acknowledgment state on the sending side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AckLifecycle {
    FirstTime,
    NotDone,
    Done,
}

impl AckLifecycle {
    pub fn can_become(self, next: AckLifecycle) -> bool {
        use AckLifecycle::*;
        matches!(
            (self, next),
            (FirstTime, NotDone) | (NotDone, Done) | (Done, NotDone)
        )
    }
}

impl fmt::Display for AckLifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsmEvent {
    ChannelConnected(u16),
    NegotiationReceived(NegotiationRequest),
    ReadReady(u16),
    WriteReady(u16),
    /// For block-carrying events the payload has already been buffered.
    HeaderReceived(u16, ChannelHeader),
    ExceptionReceived(u16, ExceptionHeader),
    BlockIoDone(BlockDescriptor),
    DiskReady,
    EndOfFile,
    PeerClosed(u16),
    LocalError(String),
}

impl FsmEvent {
    /// The name used in transition tables: header events carry their
    /// opcode, exceptions their status.
    pub fn label(&self) -> String {
        match self {
            FsmEvent::HeaderReceived(_, h) => format!("HeaderReceived:{}", h.event.name()),
            FsmEvent::ExceptionReceived(_, e) => {
                format!("ExceptionReceived:{}", if e.is_ok() { "Ok" } else { "Error" })
            }
            other => other.kind_name().to_string(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            FsmEvent::ChannelConnected(_) => "ChannelConnected",
            FsmEvent::NegotiationReceived(_) => "NegotiationReceived",
            FsmEvent::ReadReady(_) => "ReadReady",
            FsmEvent::WriteReady(_) => "WriteReady",
            FsmEvent::HeaderReceived(..) => "HeaderReceived",
            FsmEvent::ExceptionReceived(..) => "ExceptionReceived",
            FsmEvent::BlockIoDone(_) => "BlockIoDone",
            FsmEvent::DiskReady => "DiskReady",
            FsmEvent::EndOfFile => "EndOfFile",
            FsmEvent::PeerClosed(_) => "PeerClosed",
            FsmEvent::LocalError(_) => "LocalError",
        }
    }
}

impl fmt::Display for FsmEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsmEvent::ChannelConnected(i) => write!(f, "ChannelConnected({i})"),
            FsmEvent::NegotiationReceived(r) => write!(
                f,
                "NegotiationReceived({}/{},{})",
                r.channel_index, r.channel_count, r.direction
            ),
            FsmEvent::ReadReady(i) => write!(f, "ReadReady({i})"),
            FsmEvent::WriteReady(i) => write!(f, "WriteReady({i})"),
            FsmEvent::HeaderReceived(i, h) => write!(f, "HeaderReceived({i},{h})"),
            FsmEvent::ExceptionReceived(i, e) => write!(f, "ExceptionReceived({i},{e})"),
            FsmEvent::BlockIoDone(d) => write!(f, "BlockIoDone({d})"),
            FsmEvent::DiskReady => f.write_str("DiskReady"),
            FsmEvent::EndOfFile => f.write_str("EndOfFile"),
            FsmEvent::PeerClosed(i) => write!(f, "PeerClosed({i})"),
            FsmEvent::LocalError(s) => write!(f, "LocalError({s})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsmAction {
    SendHeader { channel: u16, header: ChannelHeader },
    /// Send the block header followed by the payload read for `block`.
    SendBlockPayload { channel: u16, block: BlockDescriptor },
    SendException { channel: u16, exception: ExceptionHeader },
    ReadBlockFromDisk(BlockDescriptor),
    /// Write the payload received with `block` on `channel`.
    WriteBlockToDisk { channel: u16, block: BlockDescriptor },
    MoveToReadList { channel: u16, lifecycle: AckLifecycle },
    MoveToWriteList(u16),
    /// Queue a bare `EOFT` or `EOFR` header on every channel.
    BroadcastEof(ChannelEvent),
    CloseChannel(u16),
    CloseSession,
}

impl FsmAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            FsmAction::SendHeader { .. } => ActionKind::SendHeader,
            FsmAction::SendBlockPayload { .. } => ActionKind::SendBlockPayload,
            FsmAction::SendException { .. } => ActionKind::SendException,
            FsmAction::ReadBlockFromDisk(_) => ActionKind::ReadBlockFromDisk,
            FsmAction::WriteBlockToDisk { .. } => ActionKind::WriteBlockToDisk,
            FsmAction::MoveToReadList { .. } => ActionKind::MoveToReadList,
            FsmAction::MoveToWriteList(_) => ActionKind::MoveToWriteList,
            FsmAction::BroadcastEof(_) => ActionKind::BroadcastEof,
            FsmAction::CloseChannel(_) => ActionKind::CloseChannel,
            FsmAction::CloseSession => ActionKind::CloseSession,
        }
    }
}

impl fmt::Display for FsmAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsmAction::SendHeader { channel, header } => write!(f, "SendHeader({channel},{header})"),
            FsmAction::SendBlockPayload { channel, block } => {
                write!(f, "SendBlockPayload({channel},{block})")
            }
            FsmAction::SendException { channel, exception } => {
                write!(f, "SendException({channel},{exception})")
            }
            FsmAction::ReadBlockFromDisk(d) => write!(f, "ReadBlockFromDisk({d})"),
            FsmAction::WriteBlockToDisk { channel, block } => {
                write!(f, "WriteBlockToDisk({channel},{block})")
            }
            FsmAction::MoveToReadList { channel, lifecycle } => {
                write!(f, "MoveToReadList({channel},{lifecycle})")
            }
            FsmAction::MoveToWriteList(i) => write!(f, "MoveToWriteList({i})"),
            FsmAction::BroadcastEof(e) => write!(f, "BroadcastEof({})", e.name()),
            FsmAction::CloseChannel(i) => write!(f, "CloseChannel({i})"),
            FsmAction::CloseSession => f.write_str("CloseSession"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MachineKind {
    ServerDownload,
    ClientDownload,
    ServerUpload,
    ClientUpload,
}

impl MachineKind {
    pub const ALL: [MachineKind; 4] = [
        MachineKind::ServerDownload,
        MachineKind::ClientDownload,
        MachineKind::ServerUpload,
        MachineKind::ClientUpload,
    ];

    pub fn is_server(self) -> bool {
        matches!(self, MachineKind::ServerDownload | MachineKind::ServerUpload)
    }

    /// Whether this machine reads the file and sends blocks.
    pub fn is_sender(self) -> bool {
        matches!(self, MachineKind::ServerDownload | MachineKind::ClientUpload)
    }

    pub fn direction(self) -> Direction {
        match self {
            MachineKind::ServerDownload | MachineKind::ClientDownload => Direction::Download,
            MachineKind::ServerUpload | MachineKind::ClientUpload => Direction::Upload,
        }
    }

    pub fn for_role(server: bool, direction: Direction) -> MachineKind {
        match (server, direction) {
            (true, Direction::Download) => MachineKind::ServerDownload,
            (false, Direction::Download) => MachineKind::ClientDownload,
            (true, Direction::Upload) => MachineKind::ServerUpload,
            (false, Direction::Upload) => MachineKind::ClientUpload,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MachineKind::ServerDownload => "server-download",
            MachineKind::ClientDownload => "client-download",
            MachineKind::ServerUpload => "server-upload",
            MachineKind::ClientUpload => "client-upload",
        }
    }

    /// Every state name of this machine.
    pub fn state_names(self) -> Vec<&'static str> {
        match self {
            MachineKind::ServerDownload => ServerDownloadState::ALL.iter().map(|s| s.name()).collect(),
            MachineKind::ClientDownload => ClientDownloadState::ALL.iter().map(|s| s.name()).collect(),
            MachineKind::ServerUpload => ServerUploadState::ALL.iter().map(|s| s.name()).collect(),
            MachineKind::ClientUpload => ClientUploadState::ALL.iter().map(|s| s.name()).collect(),
        }
    }
}

impl fmt::Display for MachineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every state name used by any machine. Each machine's own enum is a
/// subset, converted through this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum Loc {
    Connect,
    Authenticate,
    ReceiveParams,
    SessionLookup,
    RegisterChannel,
    ChannelsReady,
    SendRequest,
    AllChannelsUp,
    Dispatch,
    SendBlocks,
    MarkAwaitAck,
    CollectAcks,
    EofCheck,
    DrainSendBuffers,
    SendEofHeaders,
    WriteBlocks,
    CheckEof,
    Terminate,
    Error,
}

impl Loc {
    fn is_absorbing(self) -> bool {
        matches!(self, Loc::Terminate | Loc::Error)
    }

    /// States before every channel has joined.
    pub(crate) fn is_front(self) -> bool {
        matches!(
            self,
            Loc::Connect
                | Loc::Authenticate
                | Loc::ReceiveParams
                | Loc::SessionLookup
                | Loc::RegisterChannel
                | Loc::SendRequest
        )
    }
}

macro_rules! machine_state {
    ($(#[$m:meta])* $name:ident { $($v:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($v),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$v),*];

            pub fn name(self) -> &'static str {
                match self { $($name::$v => stringify!($v)),* }
            }

            pub fn is_absorbing(self) -> bool {
                self.loc().is_absorbing()
            }

            pub(crate) fn loc(self) -> Loc {
                match self { $($name::$v => Loc::$v),* }
            }

            pub(crate) fn from_loc(l: Loc) -> Option<Self> {
                match l {
                    $(Loc::$v => Some($name::$v),)*
                    #[allow(unreachable_patterns)]
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

machine_state!(
    /// Server side of a download: registers channels, then sends the file.
    ServerDownloadState {
        Authenticate, ReceiveParams, SessionLookup, RegisterChannel, ChannelsReady,
        Dispatch, SendBlocks, MarkAwaitAck, CollectAcks, EofCheck, DrainSendBuffers,
        SendEofHeaders, Terminate, Error,
    }
);

machine_state!(
    /// Client side of a download: connects every channel, then writes
    /// what arrives.
    ClientDownloadState {
        Connect, Authenticate, SendRequest, AllChannelsUp, Dispatch, WriteBlocks, CheckEof,
        Terminate, Error,
    }
);

machine_state!(
    /// Server side of an upload: registration front, receiver plane.
    ServerUploadState {
        Authenticate, ReceiveParams, SessionLookup, RegisterChannel, ChannelsReady,
        Dispatch, WriteBlocks, CheckEof, Terminate, Error,
    }
);

machine_state!(
    /// Client side of an upload: connection front, sender plane.
    ClientUploadState {
        Connect, Authenticate, SendRequest, AllChannelsUp, Dispatch, SendBlocks,
        MarkAwaitAck, CollectAcks, EofCheck, DrainSendBuffers, SendEofHeaders, Terminate,
        Error,
    }
);

/// Sender-plane bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenderCtx {
    pub scheduler: BlockScheduler,
    pub lifecycle: Vec<AckLifecycle>,
    pub(crate) in_write: BTreeSet<u16>,
    /// Blocks handed to the disk, keyed by offset.
    pub(crate) reading: std::collections::BTreeMap<u64, u16>,
    pub eof: bool,
    pub(crate) drained: BTreeSet<u16>,
    pub(crate) finished: BTreeSet<u16>,
    pub blocks_sent: u64,
    pub acks: u64,
}

/// Receiver-plane bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiverCtx {
    /// Known for downloads (from the negotiation reply), unknown for uploads.
    pub file_size: Option<u64>,
    pub data_event: ChannelEvent,
    pub(crate) writing: std::collections::BTreeMap<u64, u16>,
    pub(crate) eoft: BTreeSet<u16>,
    pub(crate) reusable: BTreeSet<u16>,
    /// Accepted byte ranges, merged: start -> end.
    pub(crate) claimed: std::collections::BTreeMap<u64, u64>,
    pub bytes_written: u64,
    pub blocks_written: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Plane {
    Sender(SenderCtx),
    Receiver(ReceiverCtx),
}

/// Everything a machine knows besides its state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineContext {
    pub kind: MachineKind,
    pub n: u16,
    pub session: Option<SessionId>,
    pub(crate) connected: BTreeSet<u16>,
    pub joined: BTreeSet<u16>,
    pub plane: Plane,
}

impl MachineContext {
    /// Context for a machine that reads a `file_size`-byte file in
    /// `block_size` blocks.
    pub fn sender(kind: MachineKind, n: u16, file_size: u64, block_size: u64) -> Self {
        assert!(kind.is_sender(), "{kind} does not send");
        MachineContext {
            kind,
            n,
            session: None,
            connected: BTreeSet::new(),
            joined: BTreeSet::new(),
            plane: Plane::Sender(SenderCtx {
                scheduler: BlockScheduler::new(file_size, block_size),
                lifecycle: vec![AckLifecycle::FirstTime; n as usize],
                in_write: BTreeSet::new(),
                reading: Default::default(),
                eof: false,
                drained: BTreeSet::new(),
                finished: BTreeSet::new(),
                blocks_sent: 0,
                acks: 0,
            }),
        }
    }

    pub fn receiver(kind: MachineKind, n: u16, file_size: Option<u64>) -> Self {
        assert!(!kind.is_sender(), "{kind} does not receive");
        MachineContext {
            kind,
            n,
            session: None,
            connected: BTreeSet::new(),
            joined: BTreeSet::new(),
            plane: Plane::Receiver(ReceiverCtx {
                file_size,
                data_event: kind.direction().mode_event(),
                writing: Default::default(),
                eoft: BTreeSet::new(),
                reusable: BTreeSet::new(),
                claimed: Default::default(),
                bytes_written: 0,
                blocks_written: 0,
            }),
        }
    }

    pub fn with_session(mut self, id: SessionId) -> Self {
        self.session = Some(id);
        self
    }

    pub fn sender_ctx(&self) -> Option<&SenderCtx> {
        match &self.plane {
            Plane::Sender(s) => Some(s),
            Plane::Receiver(_) => None,
        }
    }

    pub fn receiver_ctx(&self) -> Option<&ReceiverCtx> {
        match &self.plane {
            Plane::Receiver(r) => Some(r),
            Plane::Sender(_) => None,
        }
    }

    /// The runtime owes the machine an `EndOfFile` event.
    pub fn needs_end_of_file(&self) -> bool {
        matches!(&self.plane, Plane::Sender(s) if !s.eof && s.scheduler.is_exhausted())
            && self.joined.len() == self.n as usize
    }

    /// Channels the machine currently expects write-readiness for.
    pub fn write_list(&self) -> Vec<u16> {
        match &self.plane {
            Plane::Sender(s) => s.in_write.iter().copied().collect(),
            Plane::Receiver(_) => Vec::new(),
        }
    }

    /// Receiver: the merged byte ranges accepted so far.
    pub fn received_ranges(&self) -> Vec<(u64, u64)> {
        match &self.plane {
            Plane::Receiver(r) => r.claimed.iter().map(|(&a, &b)| (a, b)).collect(),
            Plane::Sender(_) => Vec::new(),
        }
    }
}

/// Outcome of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step<S> {
    pub state: S,
    pub ctx: MachineContext,
    pub actions: Vec<FsmAction>,
}

fn step_as<S: Copy>(
    expected: MachineKind,
    loc: Loc,
    from_loc: fn(Loc) -> Option<S>,
    ctx: &MachineContext,
    ev: &FsmEvent,
) -> Result<Step<S>> {
    if ctx.kind != expected {
        return Err(FsmError::WrongMachine {
            expected,
            actual: ctx.kind,
        });
    }
    let (next, ctx, actions) = plane::step(loc, ctx, ev)?;
    let state = from_loc(next).unwrap_or_else(|| panic!("{expected} cannot be in {next:?}"));
    Ok(Step {
        state,
        ctx,
        actions,
    })
}

pub fn step_server_download(
    state: ServerDownloadState,
    ctx: &MachineContext,
    ev: &FsmEvent,
) -> Result<Step<ServerDownloadState>> {
    step_as(
        MachineKind::ServerDownload,
        state.loc(),
        ServerDownloadState::from_loc,
        ctx,
        ev,
    )
}

pub fn step_client_download(
    state: ClientDownloadState,
    ctx: &MachineContext,
    ev: &FsmEvent,
) -> Result<Step<ClientDownloadState>> {
    step_as(
        MachineKind::ClientDownload,
        state.loc(),
        ClientDownloadState::from_loc,
        ctx,
        ev,
    )
}

pub fn step_server_upload(
    state: ServerUploadState,
    ctx: &MachineContext,
    ev: &FsmEvent,
) -> Result<Step<ServerUploadState>> {
    step_as(
        MachineKind::ServerUpload,
        state.loc(),
        ServerUploadState::from_loc,
        ctx,
        ev,
    )
}

pub fn step_client_upload(
    state: ClientUploadState,
    ctx: &MachineContext,
    ev: &FsmEvent,
) -> Result<Step<ClientUploadState>> {
    step_as(
        MachineKind::ClientUpload,
        state.loc(),
        ClientUploadState::from_loc,
        ctx,
        ev,
    )
}

/// Any of the four machines, for runtimes that pick one at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Machine {
    ServerDownload(ServerDownloadState),
    ClientDownload(ClientDownloadState),
    ServerUpload(ServerUploadState),
    ClientUpload(ClientUploadState),
}

impl Machine {
    /// The initial state of `kind`.
    pub fn start(kind: MachineKind) -> Machine {
        match kind {
            MachineKind::ServerDownload => Machine::ServerDownload(ServerDownloadState::Authenticate),
            MachineKind::ClientDownload => Machine::ClientDownload(ClientDownloadState::Connect),
            MachineKind::ServerUpload => Machine::ServerUpload(ServerUploadState::Authenticate),
            MachineKind::ClientUpload => Machine::ClientUpload(ClientUploadState::Connect),
        }
    }

    pub fn kind(self) -> MachineKind {
        match self {
            Machine::ServerDownload(_) => MachineKind::ServerDownload,
            Machine::ClientDownload(_) => MachineKind::ClientDownload,
            Machine::ServerUpload(_) => MachineKind::ServerUpload,
            Machine::ClientUpload(_) => MachineKind::ClientUpload,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Machine::ServerDownload(s) => s.name(),
            Machine::ClientDownload(s) => s.name(),
            Machine::ServerUpload(s) => s.name(),
            Machine::ClientUpload(s) => s.name(),
        }
    }

    pub(crate) fn loc(self) -> Loc {
        match self {
            Machine::ServerDownload(s) => s.loc(),
            Machine::ClientDownload(s) => s.loc(),
            Machine::ServerUpload(s) => s.loc(),
            Machine::ClientUpload(s) => s.loc(),
        }
    }

    pub fn is_absorbing(self) -> bool {
        self.loc().is_absorbing()
    }

    pub fn is_terminated(self) -> bool {
        self.loc() == Loc::Terminate
    }

    pub fn is_error(self) -> bool {
        self.loc() == Loc::Error
    }

    /// Past registration: every channel has joined.
    pub fn is_active(self) -> bool {
        !self.loc().is_front()
    }

    pub fn step(self, ctx: &MachineContext, ev: &FsmEvent) -> Result<Step<Machine>> {
        fn wrap<S>(s: Step<S>, f: fn(S) -> Machine) -> Step<Machine> {
            Step {
                state: f(s.state),
                ctx: s.ctx,
                actions: s.actions,
            }
        }
        Ok(match self {
            Machine::ServerDownload(s) => {
                wrap(step_server_download(s, ctx, ev)?, Machine::ServerDownload)
            }
            Machine::ClientDownload(s) => {
                wrap(step_client_download(s, ctx, ev)?, Machine::ClientDownload)
            }
            Machine::ServerUpload(s) => wrap(step_server_upload(s, ctx, ev)?, Machine::ServerUpload),
            Machine::ClientUpload(s) => wrap(step_client_upload(s, ctx, ev)?, Machine::ClientUpload),
        })
    }
}

impl fmt::Display for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
