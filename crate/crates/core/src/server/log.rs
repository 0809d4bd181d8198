use std::fmt::Display;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::wire::SessionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Info,
    Warn,
    Error,
}

impl Level {
    fn label(self) -> &'static str {
        match self {
            Level::Info => "INFO",
            Level::Warn => "WARN",
            Level::Error => "ERROR",
        }
    }
}

enum Sink {
    Stderr,
    File(File),
    Memory(Vec<String>),
}

/// Line-oriented, timestamped log shared by the server threads.
#[derive(Clone)]
pub struct Logger {
    sink: Arc<Mutex<Sink>>,
}

impl Logger {
    pub fn stderr() -> Self {
        Self::with(Sink::Stderr)
    }

    /// Append to `path`, creating it.
    pub fn file(path: &Path) -> io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with(Sink::File(f)))
    }

    /// Keep lines in memory; see [`Logger::lines`].
    pub fn memory() -> Self {
        Self::with(Sink::Memory(Vec::new()))
    }

    fn with(sink: Sink) -> Self {
        Logger {
            sink: Arc::new(Mutex::new(sink)),
        }
    }

    /// Lines captured by a memory logger (empty for the other sinks).
    pub fn lines(&self) -> Vec<String> {
        match &*self.sink.lock().unwrap_or_else(|p| p.into_inner()) {
            Sink::Memory(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    pub fn log(&self, level: Level, session: Option<SessionId>, msg: impl Display) {
        let ts = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ");
        let line = match session {
            Some(id) => format!("{ts} {:<5} [{id}] {msg}", level.label()),
            None => format!("{ts} {:<5} {msg}", level.label()),
        };
        let mut sink = self.sink.lock().unwrap_or_else(|p| p.into_inner());
        match &mut *sink {
            Sink::Stderr => eprintln!("{line}"),
            Sink::File(f) => {
                // Logging must never take the server down.
                let _ = writeln!(f, "{line}");
            }
            Sink::Memory(v) => v.push(line),
        }
    }

    pub fn info(&self, session: Option<SessionId>, msg: impl Display) {
        self.log(Level::Info, session, msg)
    }

    pub fn warn(&self, session: Option<SessionId>, msg: impl Display) {
        self.log(Level::Warn, session, msg)
    }

    pub fn error(&self, session: Option<SessionId>, msg: impl Display) {
        self.log(Level::Error, session, msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_lines_carry_level_and_session() {
        let log = Logger::memory();
        log.info(None, "listening");
        log.error(Some(SessionId([0xab; 16])), "boom");
        let lines = log.lines();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("INFO") && lines[0].ends_with("listening"));
        assert!(lines[1].contains("ERROR") && lines[1].contains("abab"));
    }

    #[test]
    fn file_sink_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.log");
        Logger::file(&p).unwrap().warn(None, "one");
        Logger::file(&p).unwrap().warn(None, "two");
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
