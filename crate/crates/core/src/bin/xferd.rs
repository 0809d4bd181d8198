use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use xdfs::server::{self, Logger, ServerConfig};
use xdfs::storage::DiskEngineMode;
use xdfs::transport::Endpoint;

const SHUTDOWN_GRACE: Duration = Duration::from_secs(10);

#[derive(Parser)]
#[command(name = "xferd", about = "Parallel-stream file transfer daemon")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve files under a root directory until interrupted.
    Serve {
        #[arg(long, default_value = "0.0.0.0:7070")]
        bind: String,
        #[arg(long)]
        root: PathBuf,
        #[arg(long = "disk-mode", default_value = "sync")]
        disk_mode: DiskEngineMode,
        /// Seconds a session may wait for all its channels.
        #[arg(long = "fill-timeout", default_value_t = 30.0)]
        fill_timeout: f64,
        /// Seconds without progress before a session fails.
        #[arg(long = "idle-timeout", default_value_t = 60.0)]
        idle_timeout: f64,
        #[arg(long = "max-sessions", default_value_t = 64)]
        max_sessions: usize,
        /// Append log lines here instead of stderr.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn secs(v: f64, what: &str) -> Result<Duration, String> {
    Duration::try_from_secs_f64(v).map_err(|_| format!("bad {what}: {v}"))
}

fn main() -> ExitCode {
    let Cmd::Serve {
        bind,
        root,
        disk_mode,
        fill_timeout,
        idle_timeout,
        max_sessions,
        log,
    } = Cli::parse().cmd;

    let usage = |msg: String| {
        eprintln!("xferd: {msg}");
        ExitCode::from(2)
    };
    let mut cfg = ServerConfig::new(root);
    cfg.bind = match Endpoint::parse_bind(&bind) {
        Ok(ep) => ep,
        Err(e) => return usage(e.to_string()),
    };
    cfg.disk_mode = disk_mode;
    cfg.max_sessions = max_sessions.max(1);
    match (secs(fill_timeout, "--fill-timeout"), secs(idle_timeout, "--idle-timeout")) {
        (Ok(f), Ok(i)) => (cfg.fill_timeout, cfg.idle_timeout) = (f, i),
        (Err(e), _) | (_, Err(e)) => return usage(e),
    }
    if let Some(p) = log {
        cfg.log = match Logger::file(&p) {
            Ok(l) => l,
            Err(e) => return usage(format!("cannot open log {}: {e}", p.display())),
        };
    }

    let (tx, rx) = mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        eprintln!("xferd: cannot install signal handler: {e}");
        return ExitCode::from(1);
    }
    let handle = match server::start(cfg) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("xferd: {e}");
            return ExitCode::from(1);
        }
    };
    println!("xferd listening on {}", handle.local_endpoint());
    let _ = rx.recv();
    handle.logger().info(None, "interrupted, shutting down");
    let m = handle.shutdown(SHUTDOWN_GRACE);
    eprintln!(
        "xferd: {} completed, {} failed, {} bytes in, {} bytes out",
        m.completed, m.failed, m.bytes_in, m.bytes_out
    );
    ExitCode::SUCCESS
}
