use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{co_run, open_engine, DispatchConfig, Dispatcher, SessionOutcome};
use crate::census::Census;
use crate::fsm::harness::request;
use crate::fsm::{Machine, MachineContext, MachineKind};
use crate::storage::{DiskEngineMode, Target};
use crate::transport::{sim_net, NetHandle, SimNetConfig, Waker};
use crate::wire::{Direction, SessionId};

/// A complete transfer between a server and a client dispatcher over the
/// simulated network, both driven from the calling thread.
#[derive(Debug, Clone)]
pub struct SimTransfer {
    pub direction: Direction,
    pub channels: u16,
    pub file_size: u64,
    pub block_size: u64,
    /// Seeds the file contents.
    pub data_seed: u64,
    pub net: SimNetConfig,
    pub disk_mode: DiskEngineMode,
    pub idle_timeout: Duration,
    pub max_turns: usize,
}

impl SimTransfer {
    pub fn new(direction: Direction, channels: u16, file_size: u64, block_size: u64) -> Self {
        SimTransfer {
            direction,
            channels,
            file_size,
            block_size,
            data_seed: file_size ^ 0x5eed,
            net: SimNetConfig::default(),
            disk_mode: DiskEngineMode::Sync,
            idle_timeout: Duration::from_secs(10),
            max_turns: 50_000_000,
        }
    }
}

#[derive(Debug)]
pub struct SimTransferResult {
    pub server: SessionOutcome,
    pub client: SessionOutcome,
    pub source: Vec<u8>,
    pub destination: Vec<u8>,
    pub net: NetHandle,
    pub wall: Duration,
}

impl SimTransferResult {
    pub fn succeeded(&self) -> bool {
        self.server.succeeded() && self.client.succeeded()
    }

    /// Both ends succeeded and the bytes arrived intact.
    pub fn intact(&self) -> bool {
        self.succeeded() && self.source == self.destination
    }
}

/// Deterministic file contents for a given seed.
pub fn seeded_bytes(len: u64, seed: u64) -> Vec<u8> {
    let mut v = vec![0u8; len as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

/// Run `spec` with its files under `dir`. Sync engines make the run
/// (including both traces) a pure function of the `SimTransfer`.
pub fn run_sim_transfer(spec: &SimTransfer, dir: &Path) -> io::Result<SimTransferResult> {
    let src = seeded_bytes(spec.file_size, spec.data_seed);
    let src_path = dir.join("sim-src.bin");
    let dst_path = dir.join("sim-dst.bin");
    std::fs::write(&src_path, &src)?;
    let _ = std::fs::remove_file(&dst_path);
    let (src_t, dst_t) = (Target::File(src_path), Target::File(dst_path.clone()));

    let n = spec.channels;
    let bs = spec.block_size;
    let id = SessionId([0x5a; 16]);
    let reqs: Vec<_> = (0..n).map(|i| request(id, spec.direction, i, n, bs)).collect();
    let (net, clients, servers) = sim_net(spec.net.clone(), n as usize);
    let census = Census::new();
    let cfg = DispatchConfig {
        idle_timeout: spec.idle_timeout,
        max_block: bs,
        ..DispatchConfig::default()
    };
    let storage = |e: crate::storage::StorageError| io::Error::other(e);

    let side = |server: bool, streams| -> io::Result<Dispatcher> {
        let kind = MachineKind::for_role(server, spec.direction);
        let waker = Waker::new()?;
        let (fs, ctx) = if kind.is_sender() {
            let fs = src_t.open_read().map_err(storage)?;
            (fs, MachineContext::sender(kind, n, spec.file_size, bs))
        } else {
            let fs = dst_t.open_write(Some(spec.file_size)).map_err(storage)?;
            (fs, MachineContext::receiver(kind, n, Some(spec.file_size)))
        };
        let engine = open_engine(fs, spec.disk_mode, kind.is_sender(), bs, &census, waker.clone())
            .map_err(storage)?;
        let mut d = Dispatcher::new(streams, Machine::start(kind), ctx, engine, waker, cfg.clone());
        d.register(&reqs);
        Ok(d)
    };
    let srv = side(true, servers)?;
    let cli = side(false, clients)?;
    let t0 = Instant::now();
    let (server, client) = co_run(srv, cli, spec.max_turns);
    let wall = t0.elapsed();
    let destination = std::fs::read(&dst_path)?;
    Ok(SimTransferResult {
        server,
        client,
        source: src,
        destination,
        net,
        wall,
    })
}
