//! End-to-end transfers between a real server and client over loopback.

mod common;

use common::*;
use xdfs::client::{throughput_bps, transfer, ClientError, Url};
use xdfs::piod::seeded_bytes;
use xdfs::storage::DiskEngineMode;

const MIB: u64 = 1 << 20;

#[test]
fn random_file_round_trips_with_four_channels() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir(&root).unwrap();
    let h = start(&root, DiskEngineMode::Async);
    let data = seeded_bytes(7 * MIB + 12_345, 11);
    let src = dir.path().join("src.bin");
    std::fs::write(&src, &data).unwrap();

    let up = transfer(&spec(Url::File(src), remote(&h, "/copy.bin"), 4, 256 * 1024)).unwrap();
    assert!(up.success);
    assert_eq!(up.bytes_transferred, data.len() as u64);
    assert_eq!(sha256_file(&root.join("copy.bin")), sha256(&data));

    let back = dir.path().join("back.bin");
    let down = transfer(&spec(remote(&h, "/copy.bin"), Url::File(back.clone()), 4, 256 * 1024)).unwrap();
    assert_eq!(down.bytes_transferred, data.len() as u64);
    assert_eq!(sha256_file(&back), sha256(&data));
}

#[test]
fn zero_to_null_moves_exactly_the_requested_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), DiskEngineMode::Sync);
    let r = transfer(&spec(remote(&h, "/zero:67108864"), Url::Null, 4, MIB)).unwrap();
    assert_eq!(r.bytes_transferred, 67_108_864);
    let per_channel: u64 = r.per_channel.iter().map(|c| c.bytes_received).sum();
    assert!(per_channel >= r.bytes_transferred, "headers ride on top of payload");
    assert_eq!(r.per_channel.len(), 4);

    let r = transfer(&spec(Url::Zero(3 * MIB + 1), remote(&h, "/null:"), 3, MIB)).unwrap();
    assert_eq!(r.bytes_transferred, 3 * MIB + 1);
}

#[test]
fn empty_file_with_more_channels_than_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir(&root).unwrap();
    std::fs::write(root.join("empty"), b"").unwrap();
    let h = start(&root, DiskEngineMode::Sync);
    let out = dir.path().join("out");
    let r = transfer(&spec(remote(&h, "/empty"), Url::File(out.clone()), 3, 64 * 1024)).unwrap();
    assert_eq!(r.bytes_transferred, 0);
    assert_eq!(std::fs::metadata(&out).unwrap().len(), 0);
}

#[test]
fn result_does_not_depend_on_channel_count() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir(&root).unwrap();
    let data = seeded_bytes(MIB + 4099, 5);
    std::fs::write(root.join("f"), &data).unwrap();
    let h = start(&root, DiskEngineMode::Sync);
    for n in [1u16, 2, 3, 5, 8, 16] {
        let out = dir.path().join(format!("f{n}"));
        transfer(&spec(remote(&h, "/f"), Url::File(out.clone()), n, 64 * 1024)).unwrap();
        assert_eq!(sha256_file(&out), sha256(&data), "n={n}");
    }
}

#[test]
fn report_arithmetic_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(dir.path(), DiskEngineMode::Sync);
    let r = transfer(&spec(remote(&h, "/zero:5000000"), Url::Null, 2, MIB)).unwrap();
    assert!(r.wall_time > 0.0 && r.setup_time <= r.wall_time);
    let want = throughput_bps(r.bytes_transferred, r.wall_time);
    assert!((r.throughput - want).abs() <= 1e-6 * want);
    assert!((r.throughput - 8.0 * 5_000_000.0 / r.wall_time).abs() <= 1e-6 * want);
    assert_eq!(r.parallel, 2);
    assert!(r.error.is_none());
}

#[test]
fn existing_destination_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    std::fs::create_dir(&root).unwrap();
    std::fs::write(root.join("f"), b"remote").unwrap();
    let h = start(&root, DiskEngineMode::Sync);
    let local = dir.path().join("local");
    std::fs::write(&local, b"local!").unwrap();

    let s = spec(remote(&h, "/f"), Url::File(local.clone()), 1, 64 * 1024);
    let err = transfer(&s).unwrap_err();
    assert!(matches!(err, ClientError::Exists(_)));
    assert_eq!(err.exit_code(), 3);
    assert_eq!(std::fs::read(&local).unwrap(), b"local!");

    let mut forced = s.clone();
    forced.force = true;
    transfer(&forced).unwrap();
    assert_eq!(std::fs::read(&local).unwrap(), b"remote");

    let up = spec(Url::File(local), remote(&h, "/f"), 2, 64 * 1024);
    assert!(transfer(&up).is_err(), "server refuses to clobber without force");
}

#[test]
fn unreachable_server_is_a_transfer_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let url = Url::parse(&format!("xdfs://127.0.0.1:{port}/zero:10")).unwrap();
    let err = transfer(&xdfs::client::TransferSpec::new(url, Url::Null)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
