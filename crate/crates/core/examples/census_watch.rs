//! Watch the server's thread census while sessions come and go: three
//! threads at rest, plus one per running session (and one more per session
//! with the async disk engine).

use std::error::Error;
use std::thread;
use std::time::Duration;

use xdfs::client::{transfer, TransferSpec, Url};
use xdfs::server::{self, Logger, ServerConfig};
use xdfs::storage::DiskEngineMode;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let root = tempfile::tempdir()?;
    let mut cfg = ServerConfig::new(root.path());
    cfg.log = Logger::memory();
    cfg.disk_mode = DiskEngineMode::Async;
    let srv = server::start(cfg)?;
    let census = srv.census().clone();
    println!("idle:     {:?}", census.snapshot());

    let src = Url::parse(&format!("xdfs://{}/zero:{}", srv.local_endpoint(), 96u64 << 20))?;
    let clients: Vec<_> = (0..3u16)
        .map(|i| {
            let mut spec = TransferSpec::new(src.clone(), Url::Null);
            spec.channels = i + 1;
            spec.tcp_window = 64 << 10;
            thread::spawn(move || transfer(&spec))
        })
        .collect();

    let mut last = None;
    while clients.iter().any(|c| !c.is_finished()) {
        let snap = census.snapshot();
        if last.as_ref() != Some(&snap) {
            println!("busy:     {snap:?} -> {} threads", snap.threads());
            last = Some(snap);
        }
        thread::sleep(Duration::from_millis(2));
    }
    for c in clients {
        c.join().map_err(|_| "client panicked")??;
    }
    let m = srv.shutdown(Duration::from_secs(1));
    println!("stopped:  {:?}", m.census);
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
