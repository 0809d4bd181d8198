use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::{Result, SessionError};
use crate::census::Census;
use crate::transport::{self, connect_timeout, ChannelStream, Endpoint, TransportError};
use crate::wire::{
    self, ChannelEvent, Direction, FrameLen, NegotiationReply, NegotiationRequest,
    ProtocolVersion, ReplyStatus, SessionId, WireError, CHANNEL_HEADER_LEN,
};

/// Extended-mode key carrying the upload size, so the server can size the
/// destination and check block ranges.
pub const FILE_SIZE_KEY: &str = "file_size";

/// Extended-mode key asking the server to replace an existing upload
/// destination.
pub const OVERWRITE_KEY: &str = "overwrite";

/// Rejection reasons starting with this mean the credentials were refused.
pub const AUTH_PREFIX: &str = "authentication denied: ";

/// The first frame on every new channel: the requested service's opcode
/// followed by twelve zero bytes.
pub fn service_header(event: ChannelEvent) -> [u8; CHANNEL_HEADER_LEN] {
    let mut out = [0u8; CHANNEL_HEADER_LEN];
    out[0] = event.opcode();
    out
}

fn parse_service_header(data: &[u8]) -> wire::Result<ChannelEvent> {
    let event = ChannelEvent::from_opcode(data[0])?;
    if data[1..].iter().any(|&b| b != 0) {
        return Err(WireError::MalformedHeader(
            "service selector has non-zero trailing bytes".into(),
        ));
    }
    Ok(event)
}

/// Server side: read the service selector and the negotiation request.
/// The request is decoded but not validated.
pub fn read_service_request(
    stream: &mut ChannelStream,
    deadline: Instant,
) -> Result<(ChannelEvent, NegotiationRequest)> {
    let head = stream.recv_frame(
        |b| {
            Ok(if b.len() >= CHANNEL_HEADER_LEN {
                FrameLen::Complete(CHANNEL_HEADER_LEN)
            } else {
                FrameLen::Incomplete(CHANNEL_HEADER_LEN - b.len())
            })
        },
        deadline,
    )?;
    let event = parse_service_header(&head)?;
    let frame = stream.recv_frame(wire::negotiation_frame_len, deadline)?;
    let req = wire::decode_negotiation(&frame)?;
    Ok((event, req))
}

#[derive(Clone)]
pub struct ClientParams {
    pub session_id: SessionId,
    pub direction: Direction,
    pub channels: u16,
    pub local_file_name: String,
    pub remote_file_name: String,
    pub tcp_window: u64,
    pub block_size: u64,
    pub credentials: Vec<u8>,
    /// Size of the file being uploaded.
    pub upload_size: Option<u64>,
    /// Let an upload replace an existing file.
    pub overwrite: bool,
    pub connect_timeout: Duration,
    /// Bound on the whole handshake after connecting.
    pub handshake_timeout: Duration,
    /// Count the opened streams here.
    pub census: Option<Census>,
}

impl ClientParams {
    pub fn new(direction: Direction, channels: u16, remote: &str, block_size: u64) -> Self {
        ClientParams {
            session_id: SessionId::random(),
            direction,
            channels,
            local_file_name: String::new(),
            remote_file_name: remote.to_string(),
            tcp_window: 1 << 20,
            block_size,
            credentials: Vec::new(),
            upload_size: None,
            overwrite: false,
            connect_timeout: Duration::from_secs(10),
            handshake_timeout: Duration::from_secs(30),
            census: None,
        }
    }

    /// The request channel `index` presents.
    pub fn request(&self, index: u16) -> NegotiationRequest {
        let mut extended_mode = BTreeMap::new();
        if let Some(size) = self.upload_size {
            extended_mode.insert(FILE_SIZE_KEY.to_string(), size.to_string());
        }
        if self.overwrite {
            extended_mode.insert(OVERWRITE_KEY.to_string(), "1".to_string());
        }
        NegotiationRequest {
            protocol_version: ProtocolVersion::CURRENT,
            session_id: self.session_id,
            direction: self.direction,
            channel_index: index,
            channel_count: self.channels,
            local_file_name: self.local_file_name.clone(),
            remote_file_name: self.remote_file_name.clone(),
            tcp_window_size: self.tcp_window,
            block_size: self.block_size,
            credentials: self.credentials.clone(),
            extended_mode,
        }
    }
}

/// An accepted session from the client's point of view.
#[derive(Debug)]
pub struct ClientSession {
    pub session_id: SessionId,
    pub direction: Direction,
    /// Ordered by channel index.
    pub streams: Vec<ChannelStream>,
    pub requests: Vec<NegotiationRequest>,
    /// For downloads, the size the server reported.
    pub file_size: u64,
}

/// Open `n` channels to `ep` and run the handshake on each.
pub fn negotiate_client(ep: &Endpoint, params: &ClientParams) -> Result<ClientSession> {
    let window = params.tcp_window as usize;
    let timeout = params.connect_timeout;
    negotiate_with(params, |_| connect_timeout(ep, window, timeout))
}

/// Handshake over streams produced by `connect`. On any failure every
/// stream opened so far is closed before returning.
pub fn negotiate_with<F>(params: &ClientParams, mut connect: F) -> Result<ClientSession>
where
    F: FnMut(u16) -> transport::Result<ChannelStream>,
{
    let n = params.channels;
    let requests: Vec<NegotiationRequest> = (0..n).map(|i| params.request(i)).collect();
    for r in &requests {
        r.validate()?;
    }
    let mut streams = Vec::with_capacity(n as usize);
    for i in 0..n {
        let mut s = connect(i).map_err(|source| SessionError::Channel { channel: i, source })?;
        if let Some(c) = &params.census {
            s.attach_census(c);
        }
        streams.push(s);
    }
    let deadline = Instant::now() + params.handshake_timeout;
    let service = service_header(params.direction.mode_event());
    for (i, (s, r)) in streams.iter_mut().zip(&requests).enumerate() {
        let mut frame = service.to_vec();
        frame.extend_from_slice(&wire::encode_negotiation(r)?);
        s.send_all(&frame, deadline)
            .map_err(|source| SessionError::Channel {
                channel: i as u16,
                source,
            })?;
    }
    let mut file_size = 0;
    for (i, s) in streams.iter_mut().enumerate() {
        let channel = i as u16;
        let frame = s
            .recv_frame(wire::reply_frame_len, deadline)
            .map_err(|source| SessionError::Channel { channel, source })?;
        let reply = wire::decode_reply(&frame)?;
        check_reply(&reply, params.session_id, channel)?;
        if i == 0 {
            file_size = reply.file_size;
        } else if reply.file_size != file_size {
            return Err(SessionError::ParameterMismatch(format!(
                "channel {i} reports size {}, channel 0 reported {file_size}",
                reply.file_size
            )));
        }
    }
    Ok(ClientSession {
        session_id: params.session_id,
        direction: params.direction,
        streams,
        requests,
        file_size,
    })
}

fn check_reply(reply: &NegotiationReply, id: SessionId, channel: u16) -> Result<()> {
    if reply.status == ReplyStatus::Rejected {
        if let Some(why) = reply.reason.strip_prefix(AUTH_PREFIX) {
            return Err(SessionError::AuthDenied(why.to_string()));
        }
        return Err(SessionError::Rejected {
            channel,
            reason: reply.reason.clone(),
        });
    }
    if reply.session_id != id {
        return Err(SessionError::Transport(TransportError::StreamInvalid(format!(
            "reply names session {}",
            reply.session_id
        ))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::thread;

    use super::*;
    use crate::transport::{sim_pair, SimNetConfig};

    fn serve_replies(
        mut servers: Vec<ChannelStream>,
        reply: impl Fn(&NegotiationRequest) -> NegotiationReply + Send + 'static,
    ) -> thread::JoinHandle<Vec<(ChannelEvent, NegotiationRequest)>> {
        thread::spawn(move || {
            let deadline = Instant::now() + Duration::from_secs(5);
            let mut seen = Vec::new();
            for s in &mut servers {
                let (ev, req) = read_service_request(s, deadline).unwrap();
                let bytes = wire::encode_reply(&reply(&req)).unwrap();
                s.send_all(&bytes, deadline).unwrap();
                seen.push((ev, req));
            }
            seen
        })
    }

    #[test]
    fn two_channels_negotiate() {
        let (mut clients, servers) = sim_pair(SimNetConfig::default(), 2);
        let server = serve_replies(servers, |r| NegotiationReply::accepted(r.session_id, 777));
        let params = ClientParams::new(Direction::Download, 2, "a.bin", 65536);
        let s = negotiate_with(&params, |_| Ok(clients.remove(0))).unwrap();
        assert_eq!(s.streams.len(), 2);
        assert_eq!(s.file_size, 777);
        let seen = server.join().unwrap();
        assert!(seen.iter().all(|(ev, _)| *ev == ChannelEvent::Xftsm));
        assert_eq!(seen[1].1.channel_index, 1);
    }

    #[test]
    fn denial_surfaces_and_leaks_nothing() {
        let census = Census::new();
        let (mut clients, servers) = sim_pair(SimNetConfig::default(), 3);
        let server = serve_replies(servers, |r| {
            NegotiationReply::rejected(r.session_id, format!("{AUTH_PREFIX}credentials refused"))
        });
        let mut params = ClientParams::new(Direction::Upload, 3, "a.bin", 65536);
        params.credentials = b"deny".to_vec();
        params.upload_size = Some(10);
        params.census = Some(census.clone());
        let err = negotiate_with(&params, |_| Ok(clients.remove(0))).unwrap_err();
        assert!(matches!(err, SessionError::AuthDenied(_)), "{err}");
        assert_eq!(census.streams(), 0);
        let seen = server.join().unwrap();
        assert_eq!(seen[0].0, ChannelEvent::XftsmUpload);
        assert_eq!(seen[0].1.extended_mode.get(FILE_SIZE_KEY).map(String::as_str), Some("10"));
    }

    #[test]
    fn connect_fault_aborts_cleanly() {
        let census = Census::new();
        let (mut clients, _servers) = sim_pair(SimNetConfig::default(), 8);
        let mut params = ClientParams::new(Direction::Download, 8, "a.bin", 65536);
        params.census = Some(census.clone());
        let err = negotiate_with(&params, |i| {
            if i == 5 {
                Err(TransportError::Timeout)
            } else {
                Ok(clients.remove(0))
            }
        })
        .unwrap_err();
        assert_eq!(err.channel(), Some(5));
        assert_eq!(census.streams(), 0);
    }

    #[test]
    fn service_selector_round_trip() {
        for ev in ChannelEvent::ALL {
            assert_eq!(parse_service_header(&service_header(ev)).unwrap(), ev);
        }
        let mut bad = service_header(ChannelEvent::Xftsm);
        bad[5] = 1;
        assert!(parse_service_header(&bad).is_err());
    }
}
