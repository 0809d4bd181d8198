//! One test per acceptance criterion. Each prints a single
//! `ACCEPTANCE PASS|FAIL criterion N (...)` line, then asserts.
//! Tests take a shared lock so timing-sensitive criteria run alone.
//!
//! Golden traces live in `tests/traces/`; regenerate them with
//! `UPDATE_GOLDENS=1 cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdfs::client::{transfer, Url};
use xdfs::fsm::{
    check_duality, replay, table_for, DualityMapping, FsmAction, Machine, MachineContext,
    MachineKind,
};
use xdfs::piod::{run_sim_transfer, seeded_bytes, SimTransfer};
use xdfs::session::{negotiate_client, ClientParams, SessionState};
use xdfs::storage::DiskEngineMode;
use xdfs::transport::Fragmentation;
use xdfs::wire::{
    self, BlockDescriptor, ChannelEvent, ChannelHeader, Direction, ExceptionHeader,
    NegotiationReply, NegotiationRequest, ProtocolVersion, ReplyStatus, SessionId,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

const KIB: u64 = 1024;
const MIB: u64 = 1024 * KIB;
const WIDTHS: [u16; 4] = [1, 2, 4, 8];
const DIRECTIONS: [Direction; 2] = [Direction::Download, Direction::Upload];

fn edge_sizes(bs: u64) -> [u64; 6] {
    [0, 1, bs - 1, bs, bs + 1, 10 * bs + 3]
}

/// Sorted interval union: the blocks must tile [0, size) exactly once.
fn tiles(blocks: &[BlockDescriptor], size: u64) -> Result<(), String> {
    let mut spans: Vec<(u64, u64)> = blocks.iter().map(|b| (b.offset, b.end())).collect();
    spans.sort_unstable();
    let mut cursor = 0;
    for (start, end) in spans {
        if start < cursor {
            return Err(format!("overlap at {start}"));
        }
        if start > cursor {
            return Err(format!("gap [{cursor}, {start})"));
        }
        cursor = end;
    }
    if cursor != size {
        return Err(format!("covered [0, {cursor}) of {size}"));
    }
    Ok(())
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_integrity_matrix() {
    let _g = serial();
    let t0 = Instant::now();
    let bs = 64 * KIB;
    let dir = tempfile::tempdir().unwrap();
    let mut cells = 0;
    let mut bad = Vec::new();

    for direction in DIRECTIONS {
        for size in edge_sizes(bs) {
            for n in WIDTHS {
                let mut t = SimTransfer::new(direction, n, size, bs);
                t.net.fragmentation = Fragmentation::RandomSplit;
                t.net.seed = 0x1D5;
                let r = run_sim_transfer(&t, dir.path()).unwrap();
                cells += 1;
                if !r.succeeded() || sha256(&r.source) != sha256(&r.destination) {
                    bad.push(format!(
                        "sim {direction} n={n} size={size}: {:?} / {:?}",
                        r.server.error, r.client.error
                    ));
                }
            }
        }
    }

    let root = dir.path().join("root");
    std::fs::create_dir(&root).unwrap();
    let h = start(&root, DiskEngineMode::Sync);
    for size in edge_sizes(bs) {
        let data = seeded_bytes(size, size + 1);
        let want = sha256(&data);
        std::fs::write(root.join(format!("src-{size}.bin")), &data).unwrap();
        let local = dir.path().join(format!("local-{size}.bin"));
        std::fs::write(&local, &data).unwrap();
        for n in WIDTHS {
            let dl = dir.path().join(format!("dl-{size}-{n}.bin"));
            let r = transfer(&spec(remote(&h, &format!("/src-{size}.bin")), Url::File(dl.clone()), n, bs));
            cells += 1;
            if r.is_err() || sha256_file(&dl) != want {
                bad.push(format!("loopback download n={n} size={size}: {:?}", r.err()));
            }
            let name = format!("up-{size}-{n}.bin");
            let r = transfer(&spec(Url::File(local.clone()), remote(&h, &format!("/{name}")), n, bs));
            cells += 1;
            if r.is_err() || sha256_file(&root.join(&name)) != want {
                bad.push(format!("loopback upload n={n} size={size}: {:?}", r.err()));
            }
        }
    }
    drop(h);
    let secs = t0.elapsed().as_secs_f64();
    let ok = bad.is_empty() && secs < 120.0;
    verdict(
        1,
        "integrity matrix",
        ok,
        &format!("{}/{cells} cells intact (sim + loopback), {secs:.1}s", cells - bad.len()),
    );
    assert!(ok, "{bad:#?} in {secs:.1}s");
}

// ---------------------------------------------------------------- 2

fn rand_string(rng: &mut ChaCha8Rng, max: usize) -> String {
    let len = rng.gen_range(0..=max);
    (0..len).map(|_| rng.gen::<char>()).collect()
}

fn rand_session(rng: &mut ChaCha8Rng) -> SessionId {
    let mut id = [0u8; 16];
    rng.fill_bytes(&mut id);
    id[0] |= 1;
    SessionId(id)
}

fn rand_request(rng: &mut ChaCha8Rng) -> NegotiationRequest {
    let count = rng.gen_range(1..=u16::MAX);
    let mut remote = rand_string(rng, 40);
    if remote.is_empty() {
        remote.push('r');
    }
    let mut cred = vec![0u8; rng.gen_range(0..32)];
    rng.fill_bytes(&mut cred);
    let extended_mode: BTreeMap<String, String> = (0..rng.gen_range(0..4))
        .map(|_| (rand_string(rng, 12), rand_string(rng, 12)))
        .collect();
    NegotiationRequest {
        protocol_version: ProtocolVersion::CURRENT,
        session_id: rand_session(rng),
        direction: if rng.gen() { Direction::Upload } else { Direction::Download },
        channel_index: rng.gen_range(0..count),
        channel_count: count,
        local_file_name: rand_string(rng, 40),
        remote_file_name: remote,
        tcp_window_size: rng.gen(),
        block_size: rng.gen_range(wire::MIN_BLOCK_SIZE..=wire::MAX_BLOCK_SIZE),
        credentials: cred,
        extended_mode,
    }
}

fn rand_reply(rng: &mut ChaCha8Rng) -> NegotiationReply {
    let id = rand_session(rng);
    if rng.gen() {
        NegotiationReply::accepted(id, rng.gen())
    } else {
        let mut reason = rand_string(rng, 60);
        reason.insert(0, 'x');
        NegotiationReply::rejected(id, reason)
    }
}

fn rand_header(rng: &mut ChaCha8Rng) -> ChannelHeader {
    let event = ChannelEvent::ALL[rng.gen_range(0..ChannelEvent::ALL.len())];
    if event.carries_block() {
        let length = rng.gen_range(1..=u32::MAX);
        let offset = rng.gen_range(0..=u64::MAX - length as u64);
        ChannelHeader::block(event, BlockDescriptor { offset, length })
    } else {
        ChannelHeader::bare(event)
    }
}

fn rand_exception(rng: &mut ChaCha8Rng) -> ExceptionHeader {
    if rng.gen_bool(0.3) {
        ExceptionHeader::ok()
    } else {
        ExceptionHeader::error(rng.gen(), rand_string(rng, 80))
    }
}

#[test]
fn criterion_2_codec_round_trips_and_fuzz() {
    let _g = serial();
    const N: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    let mut check = |what: &str, ok: bool, i: usize| {
        if !ok && failures.len() < 10 {
            failures.push(format!("{what} #{i}"));
        }
    };
    for i in 0..N {
        let h = rand_header(&mut rng);
        let b = wire::encode_channel_header(&h).unwrap();
        let back = wire::decode_channel_header(&b).unwrap();
        check("header", back == h && wire::encode_channel_header(&back).unwrap() == b, i);

        let r = rand_request(&mut rng);
        let b = wire::encode_negotiation(&r).unwrap();
        let back = wire::decode_negotiation(&b).unwrap();
        check("request", back == r && wire::encode_negotiation(&back).unwrap() == b, i);

        let r = rand_reply(&mut rng);
        let b = wire::encode_reply(&r).unwrap();
        let back = wire::decode_reply(&b).unwrap();
        check("reply", back == r && wire::encode_reply(&back).unwrap() == b, i);

        let e = rand_exception(&mut rng);
        let b = wire::encode_exception(&e).unwrap();
        let back = wire::decode_exception(&b).unwrap();
        check("exception", back == e && wire::encode_exception(&back).unwrap() == b, i);
    }

    // Fuzz: pure noise, and valid frames with a few bytes mutated or cut.
    let mut outcomes = [0usize; 2];
    for i in 0..N {
        let mut buf = match i % 5 {
            0 => wire::encode_negotiation(&rand_request(&mut rng)).unwrap(),
            1 => wire::encode_reply(&rand_reply(&mut rng)).unwrap(),
            2 => wire::encode_exception(&rand_exception(&mut rng)).unwrap(),
            3 => wire::encode_channel_header(&rand_header(&mut rng)).unwrap().to_vec(),
            _ => {
                let mut v = vec![0u8; rng.gen_range(0..96)];
                rng.fill_bytes(&mut v);
                v
            }
        };
        if i % 5 != 4 && !buf.is_empty() {
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(0..buf.len());
                buf[at] = rng.gen();
            }
            if rng.gen_bool(0.3) {
                buf.truncate(rng.gen_range(0..buf.len()));
            }
        }
        let results = [
            wire::decode_negotiation(&buf).is_ok(),
            wire::decode_reply(&buf).is_ok(),
            wire::decode_exception(&buf).is_ok(),
            wire::decode_channel_header(&buf).is_ok(),
            wire::negotiation_frame_len(&buf).is_ok(),
            wire::reply_frame_len(&buf).is_ok(),
            wire::exception_frame_len(&buf).is_ok(),
        ];
        for ok in results {
            outcomes[ok as usize] += 1;
        }
    }
    let ok = failures.is_empty();
    verdict(
        2,
        "codec",
        ok,
        &format!(
            "4 x {N} round trips bit-exact, {N} fuzz inputs decoded without panic ({} values, {} typed errors)",
            outcomes[1], outcomes[0]
        ),
    );
    assert!(ok, "{failures:?}");
}

// ---------------------------------------------------------------- 3

fn traces_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("traces")
}

fn initial_ctx(kind: MachineKind, n: u16, size: u64, bs: u64) -> MachineContext {
    if kind.is_sender() {
        MachineContext::sender(kind, n, size, bs)
    } else {
        MachineContext::receiver(kind, n, Some(size))
    }
}

#[test]
fn criterion_3_golden_traces_replay_and_duality() {
    let _g = serial();
    let update = std::env::var_os("UPDATE_GOLDENS").is_some();
    let dir = tempfile::tempdir().unwrap();
    let (size, bs) = (5 * 4096 + 3, 4096);
    let mut problems = Vec::new();
    let mut compared = 0;

    for direction in DIRECTIONS {
        for n in [1u16, 4] {
            let mut t = SimTransfer::new(direction, n, size, bs);
            t.net.fragmentation = Fragmentation::RandomSplit;
            t.net.seed = 0x7ACE;
            t.data_seed = 99;
            let a = run_sim_transfer(&t, dir.path()).unwrap();
            let b = run_sim_transfer(&t, dir.path()).unwrap();
            if !a.intact() {
                problems.push(format!("{direction} n={n}: transfer failed"));
            }
            for (server, out_a, out_b) in [(true, &a.server, &b.server), (false, &a.client, &b.client)] {
                let kind = MachineKind::for_role(server, direction);
                let text = out_a.trace.to_text();
                let tag = format!("{}_n{n}_{}", direction.to_string().to_lowercase(), if server { "server" } else { "client" });
                if text != out_b.trace.to_text() {
                    problems.push(format!("{tag}: two runs differ"));
                }
                let path = traces_dir().join(format!("{tag}.trace"));
                if update {
                    std::fs::create_dir_all(traces_dir()).unwrap();
                    std::fs::write(&path, &text).unwrap();
                }
                match std::fs::read_to_string(&path) {
                    Ok(golden) if golden == text => compared += 1,
                    Ok(_) => problems.push(format!("{tag}: differs from {}", path.display())),
                    Err(_) => problems.push(format!("{tag}: no golden at {}", path.display())),
                }
                let start = Machine::start(kind);
                let ctx = initial_ctx(kind, n, size, bs);
                match replay(start, &ctx, &out_a.trace.events()) {
                    Ok((again, _, _)) if again == out_a.trace => {}
                    Ok(_) => problems.push(format!("{tag}: replay diverged")),
                    Err(e) => problems.push(format!("{tag}: replay refused: {e}")),
                }
                let table = table_for(kind);
                for e in &out_a.trace.entries {
                    if table.explain(e).is_none() {
                        problems.push(format!("{tag}: unexplained {}", e.line()));
                    }
                }
            }
        }
    }
    let mut mismatches = 0;
    for (x, y) in [
        (MachineKind::ServerDownload, MachineKind::ClientUpload),
        (MachineKind::ServerUpload, MachineKind::ClientDownload),
    ] {
        let report = check_duality(&table_for(x), &table_for(y), &DualityMapping::between(x, y).unwrap());
        mismatches += report.mismatches.len();
        problems.extend(report.mismatches);
    }
    let ok = problems.is_empty();
    verdict(
        3,
        "CFSM conformance",
        ok,
        &format!("{compared}/8 golden traces match, replay deterministic, {mismatches} duality mismatches"),
    );
    assert!(ok, "{problems:#?}");
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_exactly_once_coverage() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    for i in 0..200 {
        let bs = 4096 * rng.gen_range(1..=4u64);
        let size = match i % 10 {
            0 => 0,
            1 => bs * rng.gen_range(1..20),
            _ => rng.gen_range(0..=40 * bs),
        };
        let n = rng.gen_range(1..=8u16);
        let direction = DIRECTIONS[rng.gen_range(0..2)];
        let mut t = SimTransfer::new(direction, n, size, bs);
        t.net.fragmentation = Fragmentation::RandomSplit;
        t.net.seed = i;
        let r = run_sim_transfer(&t, dir.path()).unwrap();
        let (tx, rx) = if direction == Direction::Download {
            (&r.server, &r.client)
        } else {
            (&r.client, &r.server)
        };
        let issued: Vec<BlockDescriptor> = tx
            .trace
            .actions()
            .filter_map(|a| match a {
                FsmAction::ReadBlockFromDisk(d) => Some(*d),
                _ => None,
            })
            .collect();
        let sent: Vec<BlockDescriptor> = tx
            .trace
            .actions()
            .filter_map(|a| match a {
                FsmAction::SendBlockPayload { block, .. } => Some(*block),
                _ => None,
            })
            .collect();
        let written: Vec<BlockDescriptor> = rx
            .trace
            .actions()
            .filter_map(|a| match a {
                FsmAction::WriteBlockToDisk { block, .. } => Some(*block),
                _ => None,
            })
            .collect();
        for (what, blocks) in [("issued", &issued), ("sent", &sent), ("written", &written)] {
            if let Err(e) = tiles(blocks, size) {
                bad.push(format!("triple {i} ({size}, {bs}, {n}) {direction} {what}: {e}"));
            }
        }
        if !r.intact() {
            bad.push(format!("triple {i}: content differs"));
        }
    }
    let ok = bad.is_empty();
    verdict(4, "exactly-once coverage", ok, &format!("{}/200 triples partition [0, size)", 200 - bad.len().min(200)));
    assert!(ok, "{bad:#?}");
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_thread_census() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    let mut ok = true;
    for mode in [DiskEngineMode::Sync, DiskEngineMode::Async] {
        for m in 1..=3usize {
            let h = start(dir.path(), mode);
            let census = h.census().clone();
            assert!(wait_until(Duration::from_secs(5), || census.threads() == 3));
            let clients: Vec<_> = (0..m)
                .map(|_| {
                    let s = spec(remote(&h, "/zero:107374182400"), Url::Null, 2, MIB);
                    thread::spawn(move || transfer(&s))
                })
                .collect();
            let extra = if mode == DiskEngineMode::Async { m } else { 0 };
            let want = 3 + m + extra;
            let settled = wait_until(Duration::from_secs(10), || {
                census.threads() == want && h.metrics().running_sessions == m
            });
            // Tolerance 0: the count must hold on every sample.
            let samples: Vec<usize> = (0..20)
                .map(|_| {
                    thread::sleep(Duration::from_millis(5));
                    census.threads()
                })
                .collect();
            let steady = settled && samples.iter().all(|&c| c == want);
            let snap = census.snapshot();
            let end = h.shutdown(Duration::ZERO);
            for c in clients {
                let _ = c.join();
            }
            let drained = end.census.threads() == 0;
            ok &= steady && drained;
            rows.push(format!(
                "{mode} m={m}: want {want}, saw {} (listener {} waiter {} common {} session {} disk {})",
                snap.threads(),
                snap.listener,
                snap.waiter,
                snap.common,
                snap.session,
                snap.disk
            ));
        }
    }
    verdict(5, "thread census", ok, &rows.join("; "));
    assert!(ok, "{rows:#?}");
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_fault_isolation() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir(&root).unwrap();
    let data = seeded_bytes(32 * MIB, 6);
    std::fs::write(root.join("big.bin"), &data).unwrap();
    let mut cfg = config(&root, DiskEngineMode::Sync);
    let idle = Duration::from_secs(5);
    cfg.idle_timeout = idle;
    cfg.close_grace = Duration::from_secs(1);
    let h = xdfs::server::start(cfg).unwrap();
    let census = h.census().clone();
    assert!(wait_until(Duration::from_secs(5), || census.threads() == 3));

    // Session A: a raw client that stops reading and later drops a channel.
    let params = ClientParams::new(Direction::Download, 2, "/zero:107374182400", 256 * KIB);
    let faulty = negotiate_client(h.local_endpoint(), &params).unwrap();
    // Session B: an ordinary download, slowed to overlap with the fault.
    let out = dir.path().join("b.bin");
    let mut b_spec = spec(remote(&h, "/big.bin"), Url::File(out.clone()), 4, 256 * KIB);
    b_spec.tcp_window = 64 * KIB;
    let healthy = thread::spawn(move || transfer(&b_spec));
    let both = wait_until(Duration::from_secs(5), || h.metrics().running_sessions == 2);

    let mut streams = faulty.streams;
    let mut victim = streams.pop().unwrap();
    victim.shutdown();
    drop(victim);
    let t_fault = Instant::now();
    let a_id = faulty.session_id.to_string();
    let a_failed = wait_until(idle + Duration::from_secs(2), || {
        h.metrics()
            .sessions
            .iter()
            .any(|s| s.session_id == a_id && s.status == xdfs::server::SessionStatus::Failed)
    });
    let a_secs = t_fault.elapsed();
    let b = healthy.join().unwrap();
    drop(streams);
    let b_ok = b.is_ok() && sha256_file(&out) == sha256(&data);
    let baseline = wait_until(Duration::from_secs(5), || census.threads() == 3 && census.streams() == 0);
    let ok = both && a_failed && a_secs <= idle && b_ok && baseline;
    verdict(
        6,
        "fault isolation",
        ok,
        &format!(
            "faulted session in Error after {:.2}s (idle_timeout {}s), other session hash {}, census back to 3 threads / 0 streams: {baseline}",
            a_secs.as_secs_f64(),
            idle.as_secs(),
            if b_ok { "correct" } else { "WRONG" }
        ),
    );
    assert!(ok, "both={both} a_failed={a_failed} b={:?}", b.err());
}

// ---------------------------------------------------------------- 7

fn count_runs(batch: &[(u64, usize)]) -> usize {
    let mut spans: Vec<(u64, u64)> = batch.iter().map(|&(o, l)| (o, o + l as u64)).collect();
    spans.sort_unstable();
    let mut runs = 0;
    let mut end = None;
    for (s, e) in spans {
        if end != Some(s) {
            runs += 1;
        }
        end = Some(e);
    }
    runs
}

#[test]
fn criterion_7_async_sync_equivalence() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let (mut batches, mut requests, mut writes) = (0usize, 0usize, 0usize);
    for i in 0..50u64 {
        let bs = [4096u64, 8192, 16384, 65536][rng.gen_range(0..4)];
        let size = rng.gen_range(0..=48 * bs);
        let n = rng.gen_range(1..=8u16);
        let direction = DIRECTIONS[rng.gen_range(0..2)];
        let mut hashes = Vec::new();
        for mode in [DiskEngineMode::Sync, DiskEngineMode::Async] {
            let mut t = SimTransfer::new(direction, n, size, bs);
            t.net.fragmentation = Fragmentation::RandomSplit;
            t.net.seed = i;
            t.disk_mode = mode;
            let r = run_sim_transfer(&t, dir.path()).unwrap();
            if !r.intact() {
                bad.push(format!("#{i} {mode}: {:?} {:?}", r.server.error, r.client.error));
            }
            hashes.push(sha256(&r.destination));
            if mode == DiskEngineMode::Async {
                let rx = if direction == Direction::Download { &r.client } else { &r.server };
                let stats = rx.engine.as_ref().expect("receiver engine stats");
                for rec in stats.batch_log() {
                    batches += 1;
                    requests += rec.batch.len();
                    writes += rec.repositionings;
                    let want = count_runs(&rec.batch);
                    if want != rec.repositionings {
                        bad.push(format!("#{i}: batch {:?} counted {} runs, oracle {want}", rec.batch, rec.repositionings));
                    }
                }
            }
        }
        if hashes[0] != hashes[1] {
            bad.push(format!("#{i}: sync and async destinations differ"));
        }
    }
    let ok = bad.is_empty() && batches > 0;
    verdict(
        7,
        "async/sync equivalence",
        ok,
        &format!("50 transfers identical; {batches} drained batches, {requests} writes coalesced into {writes} positional writes, all equal to the run-count oracle"),
    );
    assert!(ok, "{bad:#?}");
}

// ---------------------------------------------------------------- 8

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Bits per second of one plain TCP socket copying `bytes` on loopback.
fn raw_socket_baseline(bytes: u64, chunk: usize) -> f64 {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let t0 = Instant::now();
    let writer = thread::spawn(move || {
        let mut s = TcpStream::connect(addr).unwrap();
        let buf = vec![0u8; chunk];
        let mut left = bytes;
        while left > 0 {
            let k = left.min(chunk as u64) as usize;
            s.write_all(&buf[..k]).unwrap();
            left -= k as u64;
        }
    });
    let (mut r, _) = listener.accept().unwrap();
    let mut buf = vec![0u8; chunk];
    let mut got = 0u64;
    loop {
        let k = r.read(&mut buf).unwrap();
        if k == 0 {
            break;
        }
        got += k as u64;
    }
    writer.join().unwrap();
    assert_eq!(got, bytes);
    8.0 * bytes as f64 / t0.elapsed().as_secs_f64()
}

#[test]
fn criterion_8_throughput_sanity() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let payload = 64 * MIB;

    // (a) loopback. Runs of both kinds are interleaved so background load
    // hits them alike, and medians keep one lucky run from deciding.
    let h = start(dir.path(), DiskEngineMode::Sync);
    let (mut raw, mut ours) = (Vec::new(), Vec::new());
    for _ in 0..7 {
        raw.push(raw_socket_baseline(payload, MIB as usize));
        let r = transfer(&spec(remote(&h, &format!("/zero:{payload}")), Url::Null, 4, MIB)).unwrap();
        ours.push(r.throughput);
    }
    drop(h);
    let (baseline, xdfs_bps) = (median(&mut raw), median(&mut ours));
    let ratio_a = xdfs_bps / baseline;

    // (b) four independently capped simulated channels.
    let cap = 16 * MIB;
    let sim_bps = |n: u16| {
        let mut t = SimTransfer::new(Direction::Download, n, 16 * MIB, 256 * KIB);
        t.net.bandwidth_cap = Some(cap);
        t.idle_timeout = Duration::from_secs(30);
        let r = run_sim_transfer(&t, dir.path()).unwrap();
        assert!(r.intact());
        8.0 * r.source.len() as f64 / r.wall.as_secs_f64()
    };
    let (one, four) = (sim_bps(1), sim_bps(4));
    let ratio_b = four / one;

    let ok_a = ratio_a >= 0.8;
    let ok_b = ratio_b >= 0.9;
    verdict(
        8,
        "throughput sanity",
        ok_a && ok_b,
        &format!(
            "(a) median n=4 loopback {:.0} Mb/s vs raw socket {:.0} Mb/s = {:.0}% (need 80%); (b) capped sim n=4 {:.0} Mb/s vs n=1 {:.0} Mb/s = {ratio_b:.2}x (need 0.9x)",
            xdfs_bps / 1e6,
            baseline / 1e6,
            ratio_a * 100.0,
            four / 1e6,
            one / 1e6
        ),
    );
    assert!(ok_a, "loopback ratio {ratio_a:.3}");
    assert!(ok_b, "capped-sim ratio {ratio_b:.3}");
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_activation_waits_for_every_channel() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), DiskEngineMode::Sync);
    let census = h.census().clone();
    let reg = h.registry().clone();
    let params = ClientParams::new(Direction::Download, 4, "/zero:1048576", 64 * KIB);
    let id = params.session_id;
    let mut probes = Vec::new();
    let mut held = Vec::new();
    let mut ok = true;
    for i in 0..4u16 {
        let (s, reply) = join_raw(&h, &params, i);
        held.push(s);
        ok &= reply.status == ReplyStatus::Accepted;
        let state = reg.state_of(id);
        if i < 3 {
            // Give a premature activation every chance to show.
            thread::sleep(Duration::from_millis(50));
            let filling = reg.state_of(id) == Some(SessionState::Filling)
                && reg.joined_count(id) == i as usize + 1
                && census.threads_of(xdfs::census::ThreadRole::Session) == 0
                && h.metrics().running_sessions == 0;
            ok &= filling;
            probes.push(format!("after join {}: {:?} ({} joined)", i + 1, state, reg.joined_count(id)));
        } else {
            let active = matches!(state, Some(SessionState::Active | SessionState::Closed));
            let started = wait_until(Duration::from_secs(5), || {
                let m = h.metrics();
                m.running_sessions + m.completed as usize + m.failed as usize == 1
            });
            ok &= active && started;
            probes.push(format!("after join 4: {state:?}, session thread started: {started}"));
        }
    }
    drop(held);
    drop(h);
    verdict(9, "negotiation law", ok, &probes.join("; "));
    assert!(ok, "{probes:#?}");
}
