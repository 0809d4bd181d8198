//! `xduc SRC DST [options]`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use super::bench::parse_sweep;
use super::{parse_bytes, run_bench, transfer, BenchSpec, ClientError, ReportWriter, TransferSpec, Url};
use crate::storage::DiskEngineMode;

#[derive(Debug, Parser)]
#[command(name = "xduc", about = "Copy a file to or from an xferd server over parallel channels")]
pub struct Args {
    /// Source: xdfs://host:port/path, file:path, or zero:BYTES.
    pub src: String,
    /// Destination: xdfs://host:port/path, file:path, or null:.
    pub dst: String,
    /// Parallel channels.
    #[arg(short = 'p', long = "parallel", default_value_t = 1)]
    pub channels: u16,
    /// Block size (suffixes K, M, G).
    #[arg(long = "bs", default_value = "1M", value_parser = parse_bytes)]
    pub block_size: u64,
    /// Socket buffer size per channel (suffixes K, M, G).
    #[arg(long = "tcp-bs", default_value = "1M", value_parser = parse_bytes)]
    pub tcp_window: u64,
    #[arg(long = "disk-mode", default_value = "sync")]
    pub disk_mode: DiskEngineMode,
    /// Overwrite an existing destination.
    #[arg(long)]
    pub force: bool,
    /// Fail when nothing moves for this many seconds.
    #[arg(long = "idle-timeout", default_value_t = 60)]
    pub idle_timeout: u64,
    /// Credentials presented to the server.
    #[arg(long)]
    pub credentials: Option<String>,
    /// Repeat the copy and report throughput.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = 1, requires = "bench")]
    pub repeats: usize,
    /// Comma-separated channel counts, e.g. "1,2,4,8".
    #[arg(long, requires = "bench", value_parser = |s: &str| parse_sweep(s).map(Sweep))]
    pub sweep: Option<Sweep>,
    /// Benchmark report, .jsonl or .csv.
    #[arg(long, requires = "bench")]
    pub out: Option<PathBuf>,
}

/// A parsed `--sweep` list (kept whole so clap does not split it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep(pub Vec<u16>);

impl Args {
    pub fn spec(&self) -> Result<TransferSpec, ClientError> {
        let src = Url::parse(&self.src).map_err(ClientError::Usage)?;
        let dst = Url::parse(&self.dst).map_err(ClientError::Usage)?;
        let mut spec = TransferSpec::new(src, dst);
        spec.channels = self.channels;
        spec.block_size = self.block_size;
        spec.tcp_window = self.tcp_window;
        spec.disk_mode = self.disk_mode;
        spec.force = self.force;
        spec.idle_timeout = std::time::Duration::from_secs(self.idle_timeout.max(1));
        if let Some(c) = &self.credentials {
            spec.credentials = c.as_bytes().to_vec();
        }
        spec.plan()?;
        Ok(spec)
    }
}

fn execute(args: &Args) -> Result<(), ClientError> {
    let spec = args.spec()?;
    if !args.bench {
        let rep = transfer(&spec)?;
        eprintln!(
            "{} bytes in {:.3} s ({:.1} Mb/s) over {} channel(s)",
            rep.bytes_transferred,
            rep.wall_time,
            rep.throughput / 1e6,
            rep.parallel
        );
        return Ok(());
    }
    let mut out = args.out.as_deref().map(ReportWriter::create).transpose()?;
    let bench = BenchSpec {
        base: spec,
        repeats: args.repeats,
        sweep: args.sweep.clone().map(|s| s.0).unwrap_or_default(),
    };
    run_bench(&bench, |row| {
        if let Some(w) = out.as_mut() {
            w.write(row)?;
        }
        println!(
            "p={:<3} runs={} mean={:.1} Mb/s min={:.1} max={:.1}",
            row.parallel,
            row.runs,
            row.mean_throughput / 1e6,
            row.min_throughput / 1e6,
            row.max_throughput / 1e6
        );
        Ok(())
    })?;
    Ok(())
}

/// Parse `argv` and run; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("xduc: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let a = Args::try_parse_from(["xduc", "zero:5", "xdfs://h:1/x"]).unwrap();
        assert_eq!((a.channels, a.block_size, a.tcp_window), (1, 1 << 20, 1 << 20));
        assert_eq!(a.disk_mode, DiskEngineMode::Sync);
        assert!(!a.force && !a.bench);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["xduc"]), 2);
        assert_eq!(run(["xduc", "a", "b", "--bogus"]), 2);
        assert_eq!(run(["xduc", "zero:1", "null:"]), 2);
        assert_eq!(run(["xduc", "xdfs://h:1/a", "xdfs://h:1/b"]), 2);
        assert_eq!(run(["xduc", "null:", "xdfs://h:1/b"]), 2);
        assert_eq!(run(["xduc", "zero:1", "xdfs://h:1/b", "--bs", "12"]), 2);
        assert_eq!(run(["xduc", "zero:1", "xdfs://h:1/b", "--disk-mode", "fast"]), 2);
        assert_eq!(run(["xduc", "zero:1", "xdfs://h:1/b", "--repeats", "3"]), 2);
        assert_eq!(run(["xduc", "zero:1", "xdfs://h:1/b", "--bench", "--out", "r.txt"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(["xduc", "--help"]), 0);
    }

    #[test]
    fn unreachable_server_exits_3() {
        // Port 1 on loopback refuses connections.
        assert_eq!(run(["xduc", "zero:10", "xdfs://127.0.0.1:1/x", "--bs", "4K"]), 3);
    }
}
