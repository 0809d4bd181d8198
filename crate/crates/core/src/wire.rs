//! Binary frames exchanged on a channel.
//!
//! All integers are little-endian. Four frames exist:
//!
//! ```text
//! ChannelHeader (13 bytes, fixed)
//!    0  opcode
//!    1  offset  (u64)   zero when the event carries no block
//!    9  length  (u32)   zero when the event carries no block
//!
//! NegotiationRequest (43 bytes fixed + 4 length-prefixed fields)
//!    0  magic "XDFS"
//!    4  version major, minor
//!    6  direction (0 = upload, 1 = download)
//!    7  session id (16)
//!   23  channel index (u16)
//!   25  channel count (u16)
//!   27  tcp window size (u64)
//!   35  block size (u64)
//!   43  local name | remote name | credentials | extended mode
//!       each: len (u32) ‖ bytes; extended mode bytes are
//!       count (u32) ‖ { key len (u32) ‖ key ‖ value len (u32) ‖ value }*
//!
//! NegotiationReply
//!    0  magic "XDFR"
//!    4  status (0 = accepted, 1 = rejected)
//!    5  session id (16)
//!   21  file size (u64)
//!   29  reason len (u32) ‖ UTF-8 reason
//!
//! ExceptionHeader
//!    0  status (0 = ok, 1 = error)
//!    1  code (u16)
//!    3  message len (u32) ‖ UTF-8 message
//! ```
//!
//! The full byte-level contract lives in `docs/wire.md`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const CHANNEL_HEADER_LEN: usize = 13;
pub const NEGOTIATION_MAGIC: &[u8; 4] = b"XDFS";
pub const REPLY_MAGIC: &[u8; 4] = b"XDFR";
pub const NEGOTIATION_FIXED_LEN: usize = 43;
pub const REPLY_FIXED_LEN: usize = 33;
pub const EXCEPTION_FIXED_LEN: usize = 7;

/// Upper bound on any length-prefixed field, including exception messages.
pub const MAX_FIELD_LEN: usize = 64 * 1024;

pub const MIN_BLOCK_SIZE: u64 = 4096;
pub const MAX_BLOCK_SIZE: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("unknown channel event opcode 0x{0:02x}")]
    UnknownChannelEvent(u8),
}

pub type Result<T> = std::result::Result<T, WireError>;

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedHeader(msg.into())
}

fn violation(msg: impl Into<String>) -> WireError {
    WireError::InvariantViolation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProtocolVersion {
    pub major: u8,
    pub minor: u8,
}

impl ProtocolVersion {
    pub const CURRENT: ProtocolVersion = ProtocolVersion { major: 1, minor: 0 };
}

impl fmt::Display for ProtocolVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.major, self.minor)
    }
}

/// 16-byte session GUID. The all-zero value is reserved.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub fn random() -> Self {
        SessionId(*uuid::Uuid::new_v4().as_bytes())
    }

    pub fn is_nil(&self) -> bool {
        self.0 == [0u8; 16]
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        uuid::Uuid::from_bytes(self.0).hyphenated().fmt(f)
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({self})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelEvent {
    /// End of file; the session closes all channels.
    Eoft,
    /// End of file on this channel; the channel stays open for reuse.
    Eofr,
    /// Upload data block.
    XftsmUpload,
    /// Download data block.
    Xftsm,
    XpathM,
    Noop,
    /// Continue in the latest channel mode.
    Conm,
    Zxdfs,
}

impl ChannelEvent {
    pub const ALL: [ChannelEvent; 8] = [
        ChannelEvent::Eoft,
        ChannelEvent::Eofr,
        ChannelEvent::XftsmUpload,
        ChannelEvent::Xftsm,
        ChannelEvent::XpathM,
        ChannelEvent::Noop,
        ChannelEvent::Conm,
        ChannelEvent::Zxdfs,
    ];

    pub fn opcode(self) -> u8 {
        match self {
            ChannelEvent::Eoft => 0x00,
            ChannelEvent::Eofr => 0x01,
            ChannelEvent::XftsmUpload => 0x02,
            ChannelEvent::Xftsm => 0x03,
            ChannelEvent::XpathM => 0x04,
            ChannelEvent::Noop => 0x05,
            // 0x06 is unassigned.
            ChannelEvent::Conm => 0x07,
            ChannelEvent::Zxdfs => 0x08,
        }
    }

    pub fn from_opcode(op: u8) -> Result<Self> {
        Ok(match op {
            0x00 => ChannelEvent::Eoft,
            0x01 => ChannelEvent::Eofr,
            0x02 => ChannelEvent::XftsmUpload,
            0x03 => ChannelEvent::Xftsm,
            0x04 => ChannelEvent::XpathM,
            0x05 => ChannelEvent::Noop,
            0x07 => ChannelEvent::Conm,
            0x08 => ChannelEvent::Zxdfs,
            other => return Err(WireError::UnknownChannelEvent(other)),
        })
    }

    /// Whether a header with this event addresses a file block.
    pub fn carries_block(self) -> bool {
        matches!(
            self,
            ChannelEvent::Xftsm | ChannelEvent::XftsmUpload | ChannelEvent::Conm
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelEvent::Eoft => "EOFT",
            ChannelEvent::Eofr => "EOFR",
            ChannelEvent::XftsmUpload => "XFTSMU",
            ChannelEvent::Xftsm => "XFTSM",
            ChannelEvent::XpathM => "XPATHM",
            ChannelEvent::Noop => "NOOP",
            ChannelEvent::Conm => "CONM",
            ChannelEvent::Zxdfs => "ZXDFS",
        }
    }
}

impl fmt::Display for ChannelEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockDescriptor {
    pub offset: u64,
    pub length: u32,
}

impl BlockDescriptor {
    pub fn new(offset: u64, length: u32) -> Result<Self> {
        let d = BlockDescriptor { offset, length };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(violation("block length must be at least 1"));
        }
        if self.offset.checked_add(self.length as u64).is_none() {
            return Err(violation("block offset + length overflows"));
        }
        Ok(())
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length as u64
    }
}

impl fmt::Display for BlockDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.offset, self.length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelHeader {
    pub event: ChannelEvent,
    pub block: Option<BlockDescriptor>,
}

impl ChannelHeader {
    pub fn bare(event: ChannelEvent) -> Self {
        ChannelHeader { event, block: None }
    }

    pub fn block(event: ChannelEvent, block: BlockDescriptor) -> Self {
        ChannelHeader {
            event,
            block: Some(block),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.event.carries_block(), self.block) {
            (true, Some(b)) => b.validate(),
            (true, None) => Err(violation(format!(
                "{} header requires a block descriptor",
                self.event
            ))),
            (false, Some(_)) => Err(violation(format!(
                "{} header must not carry a block descriptor",
                self.event
            ))),
            (false, None) => Ok(()),
        }
    }
}

impl fmt::Display for ChannelHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(b) => write!(f, "{}@{}", self.event, b),
            None => write!(f, "{}", self.event),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Download,
}

impl Direction {
    fn to_byte(self) -> u8 {
        match self {
            Direction::Upload => 0,
            Direction::Download => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Direction::Upload),
            1 => Ok(Direction::Download),
            other => Err(malformed(format!("bad direction byte {other}"))),
        }
    }

    /// The channel event that selects this transfer mode.
    pub fn mode_event(self) -> ChannelEvent {
        match self {
            Direction::Upload => ChannelEvent::XftsmUpload,
            Direction::Download => ChannelEvent::Xftsm,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Upload => "Upload",
            Direction::Download => "Download",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegotiationRequest {
    pub protocol_version: ProtocolVersion,
    pub session_id: SessionId,
    pub direction: Direction,
    pub channel_index: u16,
    pub channel_count: u16,
    pub local_file_name: String,
    pub remote_file_name: String,
    pub tcp_window_size: u64,
    pub block_size: u64,
    pub credentials: Vec<u8>,
    pub extended_mode: BTreeMap<String, String>,
}

impl NegotiationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.protocol_version != ProtocolVersion::CURRENT {
            return Err(violation(format!(
                "unsupported protocol version {}",
                self.protocol_version
            )));
        }
        if self.session_id.is_nil() {
            return Err(violation("session id must not be all zero"));
        }
        if self.channel_count == 0 {
            return Err(violation("channel count must be at least 1"));
        }
        if self.channel_index >= self.channel_count {
            return Err(violation(format!(
                "channel index {} out of range for {} channels",
                self.channel_index, self.channel_count
            )));
        }
        if !(MIN_BLOCK_SIZE..=MAX_BLOCK_SIZE).contains(&self.block_size) {
            return Err(violation(format!(
                "block size {} outside [{MIN_BLOCK_SIZE}, {MAX_BLOCK_SIZE}]",
                self.block_size
            )));
        }
        if self.remote_file_name.is_empty() {
            return Err(violation("remote file name is empty"));
        }
        for (what, len) in [
            ("local file name", self.local_file_name.len()),
            ("remote file name", self.remote_file_name.len()),
            ("credentials", self.credentials.len()),
            ("extended mode", extended_mode_len(&self.extended_mode)),
        ] {
            if len > MAX_FIELD_LEN {
                return Err(violation(format!("{what} exceeds {MAX_FIELD_LEN} bytes")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExceptionHeader {
    pub status: ExceptionStatus,
    pub code: u16,
    pub message: String,
}

impl ExceptionHeader {
    pub fn ok() -> Self {
        ExceptionHeader {
            status: ExceptionStatus::Ok,
            code: 0,
            message: String::new(),
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        ExceptionHeader {
            status: ExceptionStatus::Error,
            code,
            message: message.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExceptionStatus::Ok
    }

    pub fn validate(&self) -> Result<()> {
        if self.status == ExceptionStatus::Ok && (self.code != 0 || !self.message.is_empty()) {
            return Err(violation("Ok exception must have code 0 and no message"));
        }
        if self.message.len() > MAX_FIELD_LEN {
            return Err(violation(format!(
                "exception message exceeds {MAX_FIELD_LEN} bytes"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ExceptionHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            ExceptionStatus::Ok => f.write_str("Ok"),
            ExceptionStatus::Error => write!(f, "Error({},{:?})", self.code, self.message),
        }
    }
}

/// Well-known exception codes.
pub mod codes {
    pub const IO_FAILURE: u16 = 5;
    pub const PROTOCOL: u16 = 10;
    pub const NOT_IMPLEMENTED: u16 = 11;
    pub const SHUTDOWN: u16 = 12;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegotiationReply {
    pub status: ReplyStatus,
    pub session_id: SessionId,
    pub reason: String,
    pub file_size: u64,
}

impl NegotiationReply {
    pub fn accepted(session_id: SessionId, file_size: u64) -> Self {
        NegotiationReply {
            status: ReplyStatus::Accepted,
            session_id,
            reason: String::new(),
            file_size,
        }
    }

    pub fn rejected(session_id: SessionId, reason: impl Into<String>) -> Self {
        NegotiationReply {
            status: ReplyStatus::Rejected,
            session_id,
            reason: reason.into(),
            file_size: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.status {
            ReplyStatus::Rejected if self.reason.is_empty() => {
                Err(violation("rejected reply requires a reason"))
            }
            ReplyStatus::Accepted if !self.reason.is_empty() => {
                Err(violation("accepted reply must not carry a reason"))
            }
            _ if self.reason.len() > MAX_FIELD_LEN => {
                Err(violation(format!("reason exceeds {MAX_FIELD_LEN} bytes")))
            }
            _ => Ok(()),
        }
    }
}

// ---

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed(format!("truncated {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn field(&mut self, what: &str) -> Result<&'a [u8]> {
        let len = self.u32(what)? as usize;
        if len > MAX_FIELD_LEN {
            return Err(malformed(format!("{what} length {len} exceeds limit")));
        }
        self.take(len, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let raw = self.field(what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| malformed(format!("{what} is not UTF-8")))
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed(format!(
                "{} trailing bytes after {what}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn extended_mode_len(map: &BTreeMap<String, String>) -> usize {
    4 + map.iter().map(|(k, v)| 8 + k.len() + v.len()).sum::<usize>()
}

fn encode_extended_mode(map: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::with_capacity(extended_mode_len(map));
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (k, v) in map {
        put_field(&mut out, k.as_bytes());
        put_field(&mut out, v.as_bytes());
    }
    out
}

fn decode_extended_mode(raw: &[u8]) -> Result<BTreeMap<String, String>> {
    let mut r = Reader::new(raw);
    let count = r.u32("extended mode count")? as usize;
    // Each entry needs at least 8 bytes of length prefixes.
    if count > raw.len() / 8 {
        return Err(malformed("extended mode count exceeds payload"));
    }
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let k = r.string("extended mode key")?;
        let v = r.string("extended mode value")?;
        if map.insert(k, v).is_some() {
            return Err(malformed("duplicate extended mode key"));
        }
    }
    r.finish("extended mode")?;
    Ok(map)
}

// --- negotiation

pub fn encode_negotiation(req: &NegotiationRequest) -> Result<Vec<u8>> {
    req.validate()?;
    let ext = encode_extended_mode(&req.extended_mode);
    let mut out = Vec::with_capacity(
        NEGOTIATION_FIXED_LEN
            + 16
            + req.local_file_name.len()
            + req.remote_file_name.len()
            + req.credentials.len()
            + ext.len(),
    );
    out.extend_from_slice(NEGOTIATION_MAGIC);
    out.push(req.protocol_version.major);
    out.push(req.protocol_version.minor);
    out.push(req.direction.to_byte());
    out.extend_from_slice(&req.session_id.0);
    out.extend_from_slice(&req.channel_index.to_le_bytes());
    out.extend_from_slice(&req.channel_count.to_le_bytes());
    out.extend_from_slice(&req.tcp_window_size.to_le_bytes());
    out.extend_from_slice(&req.block_size.to_le_bytes());
    put_field(&mut out, req.local_file_name.as_bytes());
    put_field(&mut out, req.remote_file_name.as_bytes());
    put_field(&mut out, &req.credentials);
    put_field(&mut out, &ext);
    Ok(out)
}

fn check_magic_and_version(buf: &[u8]) -> Result<()> {
    let n = buf.len().min(4);
    if buf[..n] != NEGOTIATION_MAGIC[..n] {
        return Err(malformed("bad negotiation magic"));
    }
    if buf.len() >= 6 {
        let v = ProtocolVersion {
            major: buf[4],
            minor: buf[5],
        };
        if v != ProtocolVersion::CURRENT {
            return Err(malformed(format!("unsupported protocol version {v}")));
        }
    }
    Ok(())
}

/// Progress of a variable-length frame sitting at the start of a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameLen {
    /// The frame is complete and spans this many bytes.
    Complete(usize),
    /// At least this many more bytes are required; reading exactly this
    /// many never consumes bytes past the end of the frame.
    Incomplete(usize),
}

impl FrameLen {
    fn upto(have: usize, need: usize) -> FrameLen {
        if have >= need {
            FrameLen::Complete(need)
        } else {
            FrameLen::Incomplete(need - have)
        }
    }
}

/// Rejects bad magic/version as early as possible.
pub fn negotiation_frame_len(buf: &[u8]) -> Result<FrameLen> {
    check_magic_and_version(buf)?;
    let mut pos = NEGOTIATION_FIXED_LEN;
    for _ in 0..4 {
        let Some(prefix) = buf.get(pos..pos + 4) else {
            return Ok(FrameLen::upto(buf.len(), pos + 4));
        };
        let len = u32::from_le_bytes(prefix.try_into().unwrap()) as usize;
        if len > MAX_FIELD_LEN {
            return Err(malformed(format!("field length {len} exceeds limit")));
        }
        pos += 4 + len;
    }
    Ok(FrameLen::upto(buf.len(), pos))
}

pub fn decode_negotiation(data: &[u8]) -> Result<NegotiationRequest> {
    if data.is_empty() {
        return Err(malformed("empty negotiation frame"));
    }
    check_magic_and_version(data)?;
    let mut r = Reader::new(data);
    r.take(4, "magic")?;
    let major = r.u8("version")?;
    let minor = r.u8("version")?;
    let direction = Direction::from_byte(r.u8("direction")?)?;
    let session_id = SessionId(r.take(16, "session id")?.try_into().unwrap());
    let channel_index = r.u16("channel index")?;
    let channel_count = r.u16("channel count")?;
    let tcp_window_size = r.u64("tcp window size")?;
    let block_size = r.u64("block size")?;
    let local_file_name = r.string("local file name")?;
    let remote_file_name = r.string("remote file name")?;
    let credentials = r.field("credentials")?.to_vec();
    let extended_mode = decode_extended_mode(r.field("extended mode")?)?;
    r.finish("negotiation frame")?;
    let req = NegotiationRequest {
        protocol_version: ProtocolVersion { major, minor },
        session_id,
        direction,
        channel_index,
        channel_count,
        local_file_name,
        remote_file_name,
        tcp_window_size,
        block_size,
        credentials,
        extended_mode,
    };
    req.validate()?;
    Ok(req)
}

// --- reply

pub fn encode_reply(reply: &NegotiationReply) -> Result<Vec<u8>> {
    reply.validate()?;
    let mut out = Vec::with_capacity(REPLY_FIXED_LEN + reply.reason.len());
    out.extend_from_slice(REPLY_MAGIC);
    out.push(match reply.status {
        ReplyStatus::Accepted => 0,
        ReplyStatus::Rejected => 1,
    });
    out.extend_from_slice(&reply.session_id.0);
    out.extend_from_slice(&reply.file_size.to_le_bytes());
    put_field(&mut out, reply.reason.as_bytes());
    Ok(out)
}

pub fn reply_frame_len(buf: &[u8]) -> Result<FrameLen> {
    let n = buf.len().min(4);
    if buf[..n] != REPLY_MAGIC[..n] {
        return Err(malformed("bad reply magic"));
    }
    let Some(prefix) = buf.get(29..33) else {
        return Ok(FrameLen::upto(buf.len(), REPLY_FIXED_LEN));
    };
    let len = u32::from_le_bytes(prefix.try_into().unwrap()) as usize;
    if len > MAX_FIELD_LEN {
        return Err(malformed("reply reason exceeds limit"));
    }
    Ok(FrameLen::upto(buf.len(), REPLY_FIXED_LEN + len))
}

pub fn decode_reply(data: &[u8]) -> Result<NegotiationReply> {
    let mut r = Reader::new(data);
    if r.take(4, "reply magic")? != REPLY_MAGIC {
        return Err(malformed("bad reply magic"));
    }
    let status = match r.u8("reply status")? {
        0 => ReplyStatus::Accepted,
        1 => ReplyStatus::Rejected,
        other => return Err(malformed(format!("bad reply status {other}"))),
    };
    let session_id = SessionId(r.take(16, "session id")?.try_into().unwrap());
    let file_size = r.u64("file size")?;
    let reason = r.string("reason")?;
    r.finish("reply")?;
    let reply = NegotiationReply {
        status,
        session_id,
        reason,
        file_size,
    };
    reply.validate()?;
    Ok(reply)
}

// --- channel header

pub fn encode_channel_header(h: &ChannelHeader) -> Result<[u8; CHANNEL_HEADER_LEN]> {
    h.validate()?;
    let mut out = [0u8; CHANNEL_HEADER_LEN];
    out[0] = h.event.opcode();
    if let Some(b) = h.block {
        out[1..9].copy_from_slice(&b.offset.to_le_bytes());
        out[9..13].copy_from_slice(&b.length.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_channel_header(data: &[u8]) -> Result<ChannelHeader> {
    if data.len() != CHANNEL_HEADER_LEN {
        return Err(malformed(format!(
            "channel header is {} bytes, expected {CHANNEL_HEADER_LEN}",
            data.len()
        )));
    }
    let event = ChannelEvent::from_opcode(data[0])?;
    let offset = u64::from_le_bytes(data[1..9].try_into().unwrap());
    let length = u32::from_le_bytes(data[9..13].try_into().unwrap());
    let h = if event.carries_block() {
        ChannelHeader::block(event, BlockDescriptor { offset, length })
    } else {
        if offset != 0 || length != 0 {
            return Err(violation(format!(
                "{event} header has non-zero block fields"
            )));
        }
        ChannelHeader::bare(event)
    };
    h.validate()?;
    Ok(h)
}

// --- exception

pub fn encode_exception(e: &ExceptionHeader) -> Result<Vec<u8>> {
    e.validate()?;
    let mut out = Vec::with_capacity(EXCEPTION_FIXED_LEN + e.message.len());
    out.push(match e.status {
        ExceptionStatus::Ok => 0,
        ExceptionStatus::Error => 1,
    });
    out.extend_from_slice(&e.code.to_le_bytes());
    put_field(&mut out, e.message.as_bytes());
    Ok(out)
}

pub fn exception_frame_len(buf: &[u8]) -> Result<FrameLen> {
    let Some(prefix) = buf.get(3..7) else {
        return Ok(FrameLen::upto(buf.len(), EXCEPTION_FIXED_LEN));
    };
    let len = u32::from_le_bytes(prefix.try_into().unwrap()) as usize;
    if len > MAX_FIELD_LEN {
        return Err(malformed(format!("exception message length {len} exceeds limit")));
    }
    Ok(FrameLen::upto(buf.len(), EXCEPTION_FIXED_LEN + len))
}

pub fn decode_exception(data: &[u8]) -> Result<ExceptionHeader> {
    let mut r = Reader::new(data);
    let status = match r.u8("exception status")? {
        0 => ExceptionStatus::Ok,
        1 => ExceptionStatus::Error,
        other => return Err(malformed(format!("bad exception status {other}"))),
    };
    let code = r.u16("exception code")?;
    let message = r.string("exception message")?;
    r.finish("exception")?;
    let e = ExceptionHeader {
        status,
        code,
        message,
    };
    e.validate()?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_request() -> NegotiationRequest {
        NegotiationRequest {
            protocol_version: ProtocolVersion::CURRENT,
            session_id: SessionId([7; 16]),
            direction: Direction::Download,
            channel_index: 0,
            channel_count: 1,
            local_file_name: "out.bin".into(),
            remote_file_name: "in.bin".into(),
            tcp_window_size: 1 << 20,
            block_size: 1 << 20,
            credentials: Vec::new(),
            extended_mode: BTreeMap::new(),
        }
    }

    #[test]
    fn negotiation_single_channel_round_trip() {
        let req = sample_request();
        let bytes = encode_negotiation(&req).unwrap();
        assert_eq!(decode_negotiation(&bytes).unwrap(), req);
        assert_eq!(
            negotiation_frame_len(&bytes).unwrap(),
            FrameLen::Complete(bytes.len())
        );
        assert_eq!(
            negotiation_frame_len(&bytes[..bytes.len() - 1]).unwrap(),
            FrameLen::Incomplete(1)
        );
        assert_eq!(
            negotiation_frame_len(&bytes[..10]).unwrap(),
            FrameLen::Incomplete(NEGOTIATION_FIXED_LEN + 4 - 10)
        );
    }

    #[test]
    fn negotiation_unicode_names() {
        let mut req = sample_request();
        req.remote_file_name = "données.bin".into();
        req.local_file_name = "数据/ファイル.bin".into();
        req.extended_mode.insert("zéro".into(), "копия".into());
        let bytes = encode_negotiation(&req).unwrap();
        assert_eq!(decode_negotiation(&bytes).unwrap(), req);
    }

    #[test]
    fn negotiation_index_out_of_range() {
        let mut req = sample_request();
        req.channel_index = req.channel_count;
        assert!(matches!(
            encode_negotiation(&req),
            Err(WireError::InvariantViolation(_))
        ));
    }

    #[test]
    fn negotiation_rejects_empty_and_bad_version() {
        assert!(matches!(
            decode_negotiation(&[]),
            Err(WireError::MalformedHeader(_))
        ));
        let mut bytes = encode_negotiation(&sample_request()).unwrap();
        bytes[4] = 2;
        match decode_negotiation(&bytes) {
            Err(WireError::MalformedHeader(m)) => assert!(m.contains("version"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(negotiation_frame_len(&bytes).is_err());
        bytes[4] = 1;
        bytes[0] = b'Y';
        assert!(matches!(
            decode_negotiation(&bytes),
            Err(WireError::MalformedHeader(_))
        ));
    }

    #[test]
    fn negotiation_field_invariants() {
        let mut req = sample_request();
        req.block_size = 4095;
        assert!(encode_negotiation(&req).is_err());
        req.block_size = MAX_BLOCK_SIZE + 1;
        assert!(encode_negotiation(&req).is_err());
        req.block_size = MIN_BLOCK_SIZE;
        req.remote_file_name.clear();
        assert!(encode_negotiation(&req).is_err());
        let mut req = sample_request();
        req.session_id = SessionId([0; 16]);
        assert!(encode_negotiation(&req).is_err());
        let mut req = sample_request();
        req.channel_count = 0;
        assert!(encode_negotiation(&req).is_err());
    }

    #[test]
    fn noop_header_layout() {
        let bytes = encode_channel_header(&ChannelHeader::bare(ChannelEvent::Noop)).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(bytes[0], 0x05);
        assert!(bytes[1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn block_header_round_trip() {
        let h = ChannelHeader::block(
            ChannelEvent::XftsmUpload,
            BlockDescriptor::new(1_048_576, 1_048_576).unwrap(),
        );
        let bytes = encode_channel_header(&h).unwrap();
        assert_eq!(
            bytes,
            [0x02, 0, 0, 0x10, 0, 0, 0, 0, 0, 0, 0, 0x10, 0],
            "little-endian offset and length"
        );
        assert_eq!(decode_channel_header(&bytes).unwrap(), h);
    }

    #[test]
    fn every_event_round_trips() {
        for ev in ChannelEvent::ALL {
            let h = if ev.carries_block() {
                ChannelHeader::block(ev, BlockDescriptor::new(42, 7).unwrap())
            } else {
                ChannelHeader::bare(ev)
            };
            let bytes = encode_channel_header(&h).unwrap();
            assert_eq!(bytes[0], ev.opcode());
            assert_eq!(decode_channel_header(&bytes).unwrap(), h);
        }
    }

    #[test]
    fn eoft_with_block_is_rejected() {
        let h = ChannelHeader {
            event: ChannelEvent::Eoft,
            block: Some(BlockDescriptor {
                offset: 0,
                length: 1,
            }),
        };
        assert!(matches!(
            encode_channel_header(&h),
            Err(WireError::InvariantViolation(_))
        ));
    }

    #[test]
    fn header_decode_errors() {
        let mut bytes = [0u8; 13];
        bytes[0] = 0x06;
        assert_eq!(
            decode_channel_header(&bytes),
            Err(WireError::UnknownChannelEvent(0x06))
        );
        assert!(matches!(
            decode_channel_header(&bytes[..12]),
            Err(WireError::MalformedHeader(_))
        ));
        // data event with zero length
        bytes[0] = 0x03;
        assert!(matches!(
            decode_channel_header(&bytes),
            Err(WireError::InvariantViolation(_))
        ));
        // overflowing block
        bytes[1..9].copy_from_slice(&u64::MAX.to_le_bytes());
        bytes[9..13].copy_from_slice(&1u32.to_le_bytes());
        assert!(decode_channel_header(&bytes).is_err());
    }

    #[test]
    fn exception_round_trips() {
        for e in [ExceptionHeader::ok(), ExceptionHeader::error(5, "disk full")] {
            let bytes = encode_exception(&e).unwrap();
            assert_eq!(
                exception_frame_len(&bytes).unwrap(),
                FrameLen::Complete(bytes.len())
            );
            assert_eq!(decode_exception(&bytes).unwrap(), e);
        }
        assert_eq!(encode_exception(&ExceptionHeader::ok()).unwrap(), [0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn exception_errors() {
        // claims a 100-byte message but carries 3
        let bytes = [1u8, 5, 0, 100, 0, 0, 0, b'a', b'b', b'c'];
        assert!(matches!(
            decode_exception(&bytes),
            Err(WireError::MalformedHeader(_))
        ));
        let bad_ok = ExceptionHeader {
            status: ExceptionStatus::Ok,
            code: 3,
            message: String::new(),
        };
        assert!(encode_exception(&bad_ok).is_err());
        let huge = [1u8, 5, 0, 0xff, 0xff, 0xff, 0x7f];
        assert!(exception_frame_len(&huge).is_err());
    }

    #[test]
    fn reply_round_trip() {
        let r = NegotiationReply::accepted(SessionId([9; 16]), 12345);
        let bytes = encode_reply(&r).unwrap();
        assert_eq!(reply_frame_len(&bytes).unwrap(), FrameLen::Complete(bytes.len()));
        assert_eq!(decode_reply(&bytes).unwrap(), r);
        let r = NegotiationReply::rejected(SessionId([9; 16]), "mode not implemented");
        assert_eq!(decode_reply(&encode_reply(&r).unwrap()).unwrap(), r);
        assert!(encode_reply(&NegotiationReply::rejected(SessionId([9; 16]), "")).is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        fn event() -> impl Strategy<Value = ChannelEvent> {
            proptest::sample::select(ChannelEvent::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn channel_header_round_trips(ev in event(), offset in any::<u64>(), length in 1u32..) {
                let h = if ev.carries_block() {
                    let offset = offset.min(u64::MAX - length as u64);
                    ChannelHeader::block(ev, BlockDescriptor { offset, length })
                } else {
                    ChannelHeader::bare(ev)
                };
                let bytes = encode_channel_header(&h).unwrap();
                prop_assert_eq!(decode_channel_header(&bytes).unwrap(), h);
            }

            #[test]
            fn exception_round_trips(code in 1u16.., msg in ".{0,200}") {
                let e = ExceptionHeader::error(code, msg);
                let bytes = encode_exception(&e).unwrap();
                prop_assert_eq!(exception_frame_len(&bytes).unwrap(), FrameLen::Complete(bytes.len()));
                prop_assert_eq!(decode_exception(&bytes).unwrap(), e);
            }

            #[test]
            fn prefixes_are_incomplete_not_errors(cut in 0usize..60) {
                let bytes = encode_negotiation(&super::sample_request()).unwrap();
                let cut = cut.min(bytes.len() - 1);
                prop_assert!(matches!(
                    negotiation_frame_len(&bytes[..cut]).unwrap(),
                    FrameLen::Incomplete(_)
                ));
                prop_assert!(decode_negotiation(&bytes[..cut]).is_err());
            }

            #[test]
            fn decoders_never_panic(data in proptest::collection::vec(any::<u8>(), 0..128)) {
                let _ = decode_negotiation(&data);
                let _ = decode_reply(&data);
                let _ = decode_exception(&data);
                let _ = decode_channel_header(&data);
                let _ = negotiation_frame_len(&data);
                let _ = reply_frame_len(&data);
                let _ = exception_frame_len(&data);
            }
        }
    }
}
