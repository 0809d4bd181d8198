//! Start a server in-process and push `zero:` data to `null:` over
//! loopback with 1, 2, 4 and 8 channels. Nothing touches the disk, so
//! this measures the protocol and the sockets alone.
//!
//! ```text
//! cargo run --release --example loopback_sweep -- [bytes]
//! ```

use std::error::Error;

use xdfs::client::{transfer, TransferSpec, Url};
use xdfs::server::{self, Logger, ServerConfig};

pub fn run_example_with(bytes: u64) -> Result<(), Box<dyn Error>> {
    let root = tempfile::tempdir()?;
    let mut cfg = ServerConfig::new(root.path());
    cfg.log = Logger::memory();
    let srv = server::start(cfg)?;
    let src = Url::parse(&format!("xdfs://{}/zero:{bytes}", srv.local_endpoint()))?;

    println!("{:>8} {:>12} {:>10} {:>12}", "channels", "bytes", "seconds", "Mbit/s");
    for n in [1u16, 2, 4, 8] {
        let mut spec = TransferSpec::new(src.clone(), Url::Null);
        spec.channels = n;
        let r = transfer(&spec)?;
        println!(
            "{n:>8} {:>12} {:>10.4} {:>12.0}",
            r.bytes_transferred,
            r.wall_time,
            r.throughput / 1e6
        );
    }
    let m = srv.shutdown(std::time::Duration::from_secs(1));
    println!("server: {} completed, {} failed, {} bytes out", m.completed, m.failed, m.bytes_out);
    Ok(())
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    run_example_with(8 << 20)
}

fn main() -> Result<(), Box<dyn Error>> {
    let bytes = match std::env::args().nth(1) {
        Some(s) => xdfs::client::parse_bytes(&s)?,
        None => 256 << 20,
    };
    run_example_with(bytes)
}
