//! Benchmark mode from code: repeat a transfer for several channel counts
//! and write one aggregate row per count, as JSON lines.

use std::error::Error;
use std::time::Duration;

use xdfs::client::{run_bench, BenchSpec, ReportWriter, TransferSpec, Url};
use xdfs::server::{self, Logger, ServerConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let root = tempfile::tempdir()?;
    let mut cfg = ServerConfig::new(root.path());
    cfg.log = Logger::memory();
    let srv = server::start(cfg)?;

    let src = Url::parse(&format!("xdfs://{}/zero:{}", srv.local_endpoint(), 16u64 << 20))?;
    let spec = BenchSpec {
        base: TransferSpec::new(src, Url::Null),
        repeats: 3,
        sweep: vec![1, 2, 4],
    };
    let out = root.path().join("report.jsonl");
    let mut writer = ReportWriter::create(&out)?;
    let rows = run_bench(&spec, |row| writer.write(row))?;
    drop(writer);
    for row in &rows {
        println!(
            "n={} mean {:.0} Mbit/s (min {:.0}, max {:.0}, sd {:.0}) over {} runs",
            row.parallel,
            row.mean_throughput / 1e6,
            row.min_throughput / 1e6,
            row.max_throughput / 1e6,
            row.stddev_throughput / 1e6,
            row.runs
        );
    }
    print!("{}", std::fs::read_to_string(&out)?);
    srv.shutdown(Duration::from_secs(1));
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
