//! The copy client: one transfer between a local url and an `xdfs://` url,
//! plus a benchmark driver and the `xduc` command line.

mod bench;
pub mod cli;
mod url;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::census::Census;
use crate::fsm::{Machine, MachineContext, MachineKind};
use crate::piod::{open_engine, ChannelCounters, DispatchConfig, Dispatcher};
use crate::session::{negotiate_client, ClientParams, SessionError};
use crate::storage::{DiskEngineMode, StorageError, Target};
use crate::transport::{Endpoint, Waker};
use crate::wire::{Direction, MAX_BLOCK_SIZE, MIN_BLOCK_SIZE};

pub use bench::{run_bench, BenchRow, BenchSpec, ReportFormat, ReportWriter};
pub use url::{parse_bytes, Url};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{0}")]
    Usage(String),
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ClientError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Usage(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct TransferSpec {
    pub src: Url,
    pub dst: Url,
    pub channels: u16,
    pub block_size: u64,
    pub tcp_window: u64,
    pub disk_mode: DiskEngineMode,
    pub force: bool,
    pub credentials: Vec<u8>,
    pub idle_timeout: Duration,
    pub connect_timeout: Duration,
    /// Count this client's threads and streams here.
    pub census: Option<Census>,
}

impl TransferSpec {
    pub fn new(src: Url, dst: Url) -> Self {
        TransferSpec {
            src,
            dst,
            channels: 1,
            block_size: 1 << 20,
            tcp_window: 1 << 20,
            disk_mode: DiskEngineMode::Sync,
            force: false,
            credentials: Vec::new(),
            idle_timeout: Duration::from_secs(60),
            connect_timeout: Duration::from_secs(10),
            census: None,
        }
    }

    /// Which way the bytes go, the server, the remote path and the local side.
    pub fn plan(&self) -> Result<(Direction, Endpoint, String, Target)> {
        let usage = |m: String| Err(ClientError::Usage(m));
        if self.channels == 0 {
            return usage("need at least one channel".into());
        }
        if !(MIN_BLOCK_SIZE..=MAX_BLOCK_SIZE).contains(&self.block_size) {
            return usage(format!(
                "block size must be between {MIN_BLOCK_SIZE} and {MAX_BLOCK_SIZE}"
            ));
        }
        match (&self.src, &self.dst) {
            (Url::Xdfs { .. }, Url::Xdfs { .. }) => usage("only one side may be xdfs://".into()),
            (Url::Xdfs { endpoint, path }, local) => match local {
                Url::Zero(_) => usage("zero: can only be a source".into()),
                _ => Ok((Direction::Download, endpoint.clone(), path.clone(), local.target().unwrap())),
            },
            (local, Url::Xdfs { endpoint, path }) => match local {
                Url::Null => usage("null: can only be a destination".into()),
                _ => Ok((Direction::Upload, endpoint.clone(), path.clone(), local.target().unwrap())),
            },
            _ => usage("one side must be an xdfs:// url".into()),
        }
    }
}

/// What one transfer did.
#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub session_id: String,
    pub direction: Direction,
    pub parallel: u16,
    pub block_size: u64,
    pub tcp_window: u64,
    pub disk_mode: DiskEngineMode,
    pub bytes_transferred: u64,
    /// Seconds from the first connect to the last byte.
    pub wall_time: f64,
    /// Bits per second: `8 * bytes_transferred / wall_time`.
    pub throughput: f64,
    /// Part of `wall_time` spent connecting and negotiating.
    pub setup_time: f64,
    pub per_channel: Vec<ChannelCounters>,
    pub success: bool,
    pub error: Option<String>,
}

/// `8 * bytes / secs`, zero for an instantaneous run.
pub fn throughput_bps(bytes: u64, secs: f64) -> f64 {
    if secs > 0.0 {
        8.0 * bytes as f64 / secs
    } else {
        0.0
    }
}

/// Run one copy to completion.
pub fn transfer(spec: &TransferSpec) -> Result<TransferReport> {
    let (direction, endpoint, remote, local) = spec.plan()?;
    if let (Direction::Download, Target::File(p)) = (direction, &local) {
        if p.exists() && !spec.force {
            return Err(ClientError::Exists(p.clone()));
        }
    }
    let census = spec.census.clone().unwrap_or_default();
    let mut params = ClientParams::new(direction, spec.channels, &remote, spec.block_size);
    params.tcp_window = spec.tcp_window;
    params.credentials = spec.credentials.clone();
    params.connect_timeout = spec.connect_timeout;
    params.overwrite = spec.force;
    params.census = Some(census.clone());
    // Open the source before connecting so a missing file costs no session.
    let source = match direction {
        Direction::Upload => {
            let fs = local.open_read()?;
            params.upload_size = Some(fs.size());
            Some(fs)
        }
        Direction::Download => None,
    };

    let t0 = Instant::now();
    let session = negotiate_client(&endpoint, &params)?;
    let setup = t0.elapsed();

    let kind = MachineKind::for_role(false, direction);
    let n = spec.channels;
    let (fs, ctx, size) = match source {
        Some(fs) => {
            let size = fs.size();
            (fs, MachineContext::sender(kind, n, size, spec.block_size), size)
        }
        None => {
            let size = session.file_size;
            let fs = local.open_write(Some(size))?;
            (fs, MachineContext::receiver(kind, n, Some(size)), size)
        }
    };
    let waker = Waker::new()?;
    let engine = open_engine(fs, spec.disk_mode, kind.is_sender(), spec.block_size, &census, waker.clone())?;
    let cfg = DispatchConfig {
        idle_timeout: spec.idle_timeout,
        max_block: spec.block_size,
        ..DispatchConfig::default()
    };
    let mut d = Dispatcher::new(session.streams, Machine::start(kind), ctx, engine, waker, cfg);
    d.register(&session.requests);
    let outcome = d.run();
    if let Some(e) = outcome.error {
        return Err(ClientError::Transfer(e));
    }
    let wall = t0.elapsed().as_secs_f64();
    Ok(TransferReport {
        session_id: session.session_id.to_string(),
        direction,
        parallel: n,
        block_size: spec.block_size,
        tcp_window: spec.tcp_window,
        disk_mode: spec.disk_mode,
        bytes_transferred: size,
        wall_time: wall,
        throughput: throughput_bps(size, wall),
        setup_time: setup.as_secs_f64(),
        per_channel: outcome.counters.channels,
        success: true,
        error: None,
    })
}
