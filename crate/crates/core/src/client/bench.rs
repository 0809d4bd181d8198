use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{transfer, ClientError, Result, TransferSpec, Url};
use crate::storage::Target;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub base: TransferSpec,
    /// Runs per channel count.
    pub repeats: usize,
    /// Channel counts to try, in order; empty means just `base.channels`.
    pub sweep: Vec<u16>,
}

/// One line of a benchmark report: the aggregate of `runs` transfers at
/// one channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub timestamp: String,
    pub direction: String,
    pub src: String,
    pub dst: String,
    pub parallel: u16,
    pub block_size: u64,
    pub tcp_window: u64,
    pub disk_mode: String,
    /// Bytes per run.
    pub bytes: u64,
    pub runs: usize,
    /// Mean wall time in seconds.
    pub mean_wall_time: f64,
    /// Throughputs in bits per second.
    pub mean_throughput: f64,
    pub min_throughput: f64,
    pub max_throughput: f64,
    pub stddev_throughput: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Jsonl,
    Csv,
}

impl ReportFormat {
    pub fn from_path(p: &Path) -> Result<Self> {
        match p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jsonl") | Some("json") => Ok(ReportFormat::Jsonl),
            Some("csv") => Ok(ReportFormat::Csv),
            _ => Err(ClientError::Usage(format!(
                "report {} must end in .jsonl or .csv",
                p.display()
            ))),
        }
    }
}

pub enum ReportWriter {
    Jsonl(BufWriter<File>),
    Csv(Box<csv::Writer<File>>),
}

impl ReportWriter {
    pub fn create(p: &Path) -> Result<Self> {
        let format = ReportFormat::from_path(p)?;
        let f = File::create(p)?;
        Ok(match format {
            ReportFormat::Jsonl => ReportWriter::Jsonl(BufWriter::new(f)),
            ReportFormat::Csv => ReportWriter::Csv(Box::new(csv::Writer::from_writer(f))),
        })
    }

    pub fn write(&mut self, row: &BenchRow) -> Result<()> {
        match self {
            ReportWriter::Jsonl(w) => {
                serde_json::to_writer(&mut *w, row).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            ReportWriter::Csv(w) => {
                w.serialize(row).map_err(|e| ClientError::Io(std::io::Error::other(e)))?;
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn stats(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, min, max, var.sqrt())
}

/// Run `repeats` transfers at every channel count and hand one aggregate
/// row per count to `emit` as soon as it is complete. The first failed
/// transfer ends the sweep; rows already emitted stay emitted.
pub fn run_bench(spec: &BenchSpec, mut emit: impl FnMut(&BenchRow) -> Result<()>) -> Result<Vec<BenchRow>> {
    if spec.repeats == 0 {
        return Err(ClientError::Usage("--repeats must be at least 1".into()));
    }
    let overwrites = match &spec.base.dst {
        Url::File(_) => true,
        Url::Xdfs { path, .. } => Target::pseudo(path.trim_start_matches('/')).is_none(),
        _ => false,
    };
    if overwrites && !spec.base.force && spec.repeats * spec.sweep.len().max(1) > 1 {
        return Err(ClientError::Usage(
            "repeated runs overwrite the destination; pass --force".into(),
        ));
    }
    let widths = if spec.sweep.is_empty() {
        vec![spec.base.channels]
    } else {
        spec.sweep.clone()
    };
    let mut rows = Vec::with_capacity(widths.len());
    for n in widths {
        let mut run_spec = spec.base.clone();
        run_spec.channels = n;
        let reports = (0..spec.repeats)
            .map(|_| transfer(&run_spec))
            .collect::<Result<Vec<_>>>()?;
        let rates: Vec<f64> = reports.iter().map(|r| r.throughput).collect();
        let (mean, min, max, sd) = stats(&rates);
        let first = &reports[0];
        let row = BenchRow {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            direction: first.direction.to_string().to_lowercase(),
            src: run_spec.src.to_string(),
            dst: run_spec.dst.to_string(),
            parallel: n,
            block_size: run_spec.block_size,
            tcp_window: run_spec.tcp_window,
            disk_mode: run_spec.disk_mode.to_string(),
            bytes: first.bytes_transferred,
            runs: reports.len(),
            mean_wall_time: reports.iter().map(|r| r.wall_time).sum::<f64>() / reports.len() as f64,
            mean_throughput: mean,
            min_throughput: min,
            max_throughput: max,
            stddev_throughput: sd,
        };
        emit(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Parse `"1,2,4,8"`.
pub(super) fn parse_sweep(s: &str) -> std::result::Result<Vec<u16>, String> {
    s.split(',')
        .map(|p| {
            let n: u16 = p.trim().parse().map_err(|_| format!("bad channel count {p:?} in sweep"))?;
            if n == 0 {
                return Err("sweep entries must be at least 1".into());
            }
            Ok(n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let (mean, min, max, sd) = stats(&[1.0, 2.0, 3.0]);
        assert_eq!((mean, min, max), (2.0, 1.0, 3.0));
        assert!((sd - 1.0).abs() < 1e-12);
        assert_eq!(stats(&[5.0]).3, 0.0);
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("1,2, 4,8").unwrap(), vec![1, 2, 4, 8]);
        assert!(parse_sweep("1,0").is_err());
        assert!(parse_sweep("a").is_err());
    }

    #[test]
    fn report_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let row = BenchRow {
            timestamp: "2026-01-01T00:00:00.000Z".into(),
            direction: "upload".into(),
            src: "zero:10".into(),
            dst: "xdfs://h:1/null:".into(),
            parallel: 4,
            block_size: 65536,
            tcp_window: 1 << 20,
            disk_mode: "sync".into(),
            bytes: 10,
            runs: 3,
            mean_wall_time: 0.5,
            mean_throughput: 160.0,
            min_throughput: 150.0,
            max_throughput: 170.0,
            stddev_throughput: 10.0,
        };
        for name in ["r.jsonl", "r.csv"] {
            let p = dir.path().join(name);
            let mut w = ReportWriter::create(&p).unwrap();
            w.write(&row).unwrap();
            w.write(&row).unwrap();
            drop(w);
            let back: Vec<BenchRow> = if name.ends_with("jsonl") {
                std::fs::read_to_string(&p)
                    .unwrap()
                    .lines()
                    .map(|l| serde_json::from_str(l).unwrap())
                    .collect()
            } else {
                csv::Reader::from_path(&p)
                    .unwrap()
                    .deserialize()
                    .map(|r| r.unwrap())
                    .collect()
            };
            assert_eq!(back, vec![row.clone(), row.clone()], "{name}");
        }
        assert!(ReportFormat::from_path(Path::new("r.txt")).is_err());
    }

    #[test]
    fn dead_server_yields_no_rows() {
        let mut base = TransferSpec::new(Url::Zero(10), Url::parse("xdfs://127.0.0.1:1/null:").unwrap());
        base.block_size = 4096;
        let spec = BenchSpec {
            base,
            repeats: 2,
            sweep: vec![1, 2],
        };
        let mut rows = 0;
        let err = run_bench(&spec, |_| {
            rows += 1;
            Ok(())
        })
        .unwrap_err();
        assert_eq!(rows, 0);
        assert_eq!(err.exit_code(), 3);
    }
}
