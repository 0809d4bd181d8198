#![allow(dead_code)]

use std::io::Write;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use xdfs::client::{TransferSpec, Url};
use xdfs::server::{self, Logger, ServerConfig, ServerHandle};
use xdfs::session::{service_header, ClientParams};
use xdfs::storage::DiskEngineMode;
use xdfs::transport::{connect, ChannelStream};
use xdfs::wire::{self, NegotiationReply};

pub fn sha256(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file's bytes, or a marker that never matches a real hash.
pub fn sha256_file(p: &Path) -> String {
    match std::fs::read(p) {
        Ok(b) => sha256(&b),
        Err(e) => format!("unreadable {}: {e}", p.display()),
    }
}

pub fn wait_until(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + limit;
    while Instant::now() < end {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(5));
    }
    cond()
}

pub fn config(root: &Path, mode: DiskEngineMode) -> ServerConfig {
    let mut cfg = ServerConfig::new(root);
    cfg.disk_mode = mode;
    cfg.log = Logger::memory();
    cfg.poll_interval = Duration::from_millis(20);
    cfg.idle_timeout = Duration::from_secs(10);
    cfg
}

pub fn start(root: &Path, mode: DiskEngineMode) -> ServerHandle {
    server::start(config(root, mode)).unwrap()
}

pub fn remote(h: &ServerHandle, path: &str) -> Url {
    Url::parse(&format!("xdfs://{}{path}", h.local_endpoint())).unwrap()
}

pub fn spec(src: Url, dst: Url, n: u16, bs: u64) -> TransferSpec {
    let mut s = TransferSpec::new(src, dst);
    s.channels = n;
    s.block_size = bs;
    s.idle_timeout = Duration::from_secs(10);
    s
}

/// Open one raw channel and present `params.request(index)`.
pub fn join_raw(h: &ServerHandle, params: &ClientParams, index: u16) -> (ChannelStream, NegotiationReply) {
    let mut s = connect(h.local_endpoint(), 1 << 16).unwrap();
    let mut frame = service_header(params.direction.mode_event()).to_vec();
    frame.extend(wire::encode_negotiation(&params.request(index)).unwrap());
    let deadline = Instant::now() + Duration::from_secs(5);
    s.send_all(&frame, deadline).unwrap();
    let reply = wire::decode_reply(&s.recv_frame(wire::reply_frame_len, deadline).unwrap()).unwrap();
    (s, reply)
}

/// One unbuffered line that survives the test harness's output capture.
pub fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE {} criterion {id} ({name}): {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}
