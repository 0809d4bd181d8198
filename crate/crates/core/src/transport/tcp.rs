use std::io::{self, IoSlice, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::fd::{AsRawFd, RawFd};
use std::time::Duration;

use socket2::{Domain, Protocol, SockRef, Socket, Type};

use super::{Backend, ChannelStream, Endpoint, Result, TransportError};
use crate::census::Census;

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

pub(crate) struct TcpChannel {
    stream: TcpStream,
    peer: Option<SocketAddr>,
}

impl TcpChannel {
    fn from_std(stream: TcpStream) -> io::Result<Self> {
        stream.set_nonblocking(true)?;
        // Headers are 13 bytes; coalescing delays would stall every block.
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr().ok();
        Ok(TcpChannel { stream, peer })
    }

    pub(crate) fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.stream.read(buf)
    }

    pub(crate) fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.stream.write(buf)
    }

    pub(crate) fn write_vectored(&mut self, bufs: &[IoSlice<'_>]) -> io::Result<usize> {
        self.stream.write_vectored(bufs)
    }

    pub(crate) fn shutdown(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    pub(crate) fn set_buffer_size(&mut self, bytes: usize) -> io::Result<()> {
        let sock = SockRef::from(&self.stream);
        sock.set_send_buffer_size(bytes)?;
        sock.set_recv_buffer_size(bytes)
    }

    pub(crate) fn buffer_sizes(&self) -> io::Result<(usize, usize)> {
        let sock = SockRef::from(&self.stream);
        Ok((sock.send_buffer_size()?, sock.recv_buffer_size()?))
    }

    pub(crate) fn peer_label(&self) -> String {
        match self.peer {
            Some(p) => format!("tcp:{p}"),
            None => "tcp:?".into(),
        }
    }
}

impl AsRawFd for TcpChannel {
    fn as_raw_fd(&self) -> RawFd {
        self.stream.as_raw_fd()
    }
}

/// Listening socket handing out non-blocking [`ChannelStream`]s.
pub struct Acceptor {
    listener: TcpListener,
    census: Option<Census>,
}

impl Acceptor {
    pub fn local_endpoint(&self) -> Result<Endpoint> {
        let addr = self.listener.local_addr()?;
        Ok(Endpoint {
            host: addr.ip().to_string(),
            port: addr.port(),
        })
    }

    pub fn set_census(&mut self, census: Census) {
        self.census = Some(census);
    }

    /// Accept one pending connection, if any, without blocking.
    pub fn try_accept(&self) -> Result<Option<ChannelStream>> {
        match self.listener.accept() {
            Ok((stream, _)) => {
                let mut s = ChannelStream::new(Backend::Tcp(TcpChannel::from_std(stream)?));
                if let Some(c) = &self.census {
                    s.attach_census(c);
                }
                Ok(Some(s))
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => Ok(None),
            // The peer gave up between SYN and accept.
            Err(e) if e.kind() == io::ErrorKind::ConnectionAborted => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Wait up to `timeout` for one connection.
    pub fn accept(&self, timeout: Duration) -> Result<Option<ChannelStream>> {
        if let Some(s) = self.try_accept()? {
            return Ok(Some(s));
        }
        if self.wait_readable(timeout)? {
            self.try_accept()
        } else {
            Ok(None)
        }
    }

    pub(crate) fn wait_readable(&self, timeout: Duration) -> Result<bool> {
        let mut pfd = libc::pollfd {
            fd: self.listener.as_raw_fd(),
            events: libc::POLLIN,
            revents: 0,
        };
        let ms = timeout.as_millis().min(i32::MAX as u128) as i32;
        let rc = unsafe { libc::poll(&mut pfd, 1, ms) };
        if rc < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                return Ok(false);
            }
            return Err(err.into());
        }
        Ok(rc > 0)
    }
}

impl AsRawFd for Acceptor {
    fn as_raw_fd(&self) -> RawFd {
        self.listener.as_raw_fd()
    }
}

pub fn listen(ep: &Endpoint) -> Result<Acceptor> {
    let listener =
        TcpListener::bind((ep.host.as_str(), ep.port)).map_err(TransportError::BindFailure)?;
    listener
        .set_nonblocking(true)
        .map_err(TransportError::BindFailure)?;
    Ok(Acceptor {
        listener,
        census: None,
    })
}

/// Connect with buffers requested at `window` bytes before the handshake,
/// so the kernel can pick a matching window scale.
pub fn connect(ep: &Endpoint, window: usize) -> Result<ChannelStream> {
    connect_timeout(ep, window, DEFAULT_CONNECT_TIMEOUT)
}

pub fn connect_timeout(ep: &Endpoint, window: usize, timeout: Duration) -> Result<ChannelStream> {
    let addrs: Vec<SocketAddr> = (ep.host.as_str(), ep.port)
        .to_socket_addrs()
        .map_err(TransportError::ConnectFailure)?
        .collect();
    let mut last = io::Error::new(io::ErrorKind::NotFound, "no address resolved");
    for addr in addrs {
        let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))
            .map_err(TransportError::ConnectFailure)?;
        if window > 0 {
            let _ = socket.set_send_buffer_size(window);
            let _ = socket.set_recv_buffer_size(window);
        }
        match socket.connect_timeout(&addr.into(), timeout) {
            Ok(()) => {
                let stream: TcpStream = socket.into();
                let chan = TcpChannel::from_std(stream).map_err(TransportError::ConnectFailure)?;
                return Ok(ChannelStream::new(Backend::Tcp(chan)));
            }
            Err(e) if e.kind() == io::ErrorKind::TimedOut => return Err(TransportError::Timeout),
            Err(e) => last = e,
        }
    }
    Err(TransportError::ConnectFailure(last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{poll_readiness, Interest};
    use std::time::Instant;

    fn loopback() -> (Acceptor, Endpoint) {
        let acc = listen(&Endpoint::ephemeral("127.0.0.1")).unwrap();
        let ep = acc.local_endpoint().unwrap();
        (acc, ep)
    }

    #[test]
    fn accept_one_and_echo() {
        let (acc, ep) = loopback();
        let mut c = connect(&ep, 0).unwrap();
        let mut s = acc.accept(Duration::from_secs(5)).unwrap().expect("accepted");
        let deadline = Instant::now() + Duration::from_secs(5);
        c.send_all(b"ping", deadline).unwrap();
        let got = s
            .recv_frame(
                |b| {
                    Ok(if b.len() >= 4 {
                        crate::wire::FrameLen::Complete(4)
                    } else {
                        crate::wire::FrameLen::Incomplete(4 - b.len())
                    })
                },
                deadline,
            )
            .unwrap();
        assert_eq!(got, b"ping");
    }

    #[test]
    fn double_bind_fails() {
        let (_acc, ep) = loopback();
        assert!(matches!(listen(&ep), Err(TransportError::BindFailure(_))));
    }

    #[test]
    fn connect_to_closed_port_fails() {
        let ep = {
            let (_acc, ep) = loopback();
            ep
        };
        assert!(matches!(
            connect(&ep, 0),
            Err(TransportError::ConnectFailure(_))
        ));
    }

    #[test]
    fn window_request_is_applied() {
        let (acc, ep) = loopback();
        let c = connect(&ep, 1 << 20).unwrap();
        let (snd, rcv) = c.buffer_sizes().unwrap();
        // Linux doubles the request and clamps to the sysctl maxima; either
        // way the result is at least the kernel minimum.
        assert!(snd >= 4096 && rcv >= 2048, "{snd} {rcv}");
        drop(acc);
    }

    #[test]
    fn idle_poll_times_out() {
        let (acc, ep) = loopback();
        let _c = connect(&ep, 0).unwrap();
        let s = acc.accept(Duration::from_secs(5)).unwrap().unwrap();
        let start = Instant::now();
        let r = poll_readiness(&[&s], &[Interest::READ], Duration::from_millis(10)).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(10));
        assert!(!r[0].any());
    }
}
