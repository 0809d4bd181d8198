//! Embed the server in an application: upload a file with four channels,
//! fetch it back with three, and print the server's metrics as JSON.

use std::error::Error;
use std::time::Duration;

use xdfs::client::{transfer, TransferSpec, Url};
use xdfs::server::{self, Logger, ServerConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let root = tempfile::tempdir()?;
    let local = tempfile::tempdir()?;
    let mut cfg = ServerConfig::new(root.path());
    cfg.log = Logger::memory();
    let srv = server::start(cfg)?;
    let base = format!("xdfs://{}", srv.local_endpoint());

    let original: Vec<u8> = (0..3_000_000u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8).collect();
    let src = local.path().join("payload.bin");
    std::fs::write(&src, &original)?;

    let mut up = TransferSpec::new(Url::File(src), Url::parse(&format!("{base}/payload.bin"))?);
    up.channels = 4;
    up.block_size = 256 << 10;
    let r = transfer(&up)?;
    println!("upload:   {} bytes over {} channels in {:.3}s", r.bytes_transferred, r.parallel, r.wall_time);

    let back = local.path().join("back.bin");
    let mut down = TransferSpec::new(Url::parse(&format!("{base}/payload.bin"))?, Url::File(back.clone()));
    down.channels = 3;
    down.block_size = 256 << 10;
    let r = transfer(&down)?;
    println!("download: {} bytes over {} channels in {:.3}s", r.bytes_transferred, r.parallel, r.wall_time);

    if std::fs::read(&back)? != original {
        return Err("round trip changed the data".into());
    }
    let metrics = srv.shutdown(Duration::from_secs(1));
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    for line in session_lines(&metrics) {
        println!("{line}");
    }
    Ok(())
}

fn session_lines(m: &server::ServerMetrics) -> Vec<String> {
    m.sessions
        .iter()
        .map(|s| format!("session {} {} {:?} in {:.3}s", s.session_id, s.direction, s.status, s.elapsed_secs))
        .collect()
}

fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
