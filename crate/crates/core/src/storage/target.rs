use std::path::PathBuf;

use super::{null_stream, open_stream, zero_stream, FileStream, Result, StorageError, StreamMode};

/// Where a transfer's bytes come from or go to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    File(PathBuf),
    /// `zero:N`: N zero bytes, read only.
    Zero(u64),
    /// `null:`: discards everything, write only.
    Null,
}

impl Target {
    /// Recognize the pseudo paths `zero:N` and `null:`; `None` for
    /// anything else.
    pub fn pseudo(s: &str) -> Option<std::result::Result<Target, String>> {
        if let Some(n) = s.strip_prefix("zero:") {
            return Some(
                n.parse::<u64>()
                    .map(Target::Zero)
                    .map_err(|_| format!("bad byte count in {s:?}")),
            );
        }
        if s == "null:" {
            return Some(Ok(Target::Null));
        }
        None
    }

    pub fn is_readable(&self) -> bool {
        !matches!(self, Target::Null)
    }

    pub fn is_writable(&self) -> bool {
        !matches!(self, Target::Zero(_))
    }

    pub fn open_read(&self) -> Result<FileStream> {
        match self {
            Target::File(p) => open_stream(&path_str(p)?, StreamMode::Read),
            Target::Zero(n) => Ok(zero_stream(*n)),
            Target::Null => Err(StorageError::InvalidMode("null: cannot be read")),
        }
    }

    /// Create (truncating) and pre-size to `size` when known.
    pub fn open_write(&self, size: Option<u64>) -> Result<FileStream> {
        match self {
            Target::File(p) => {
                let mut fs = open_stream(&path_str(p)?, StreamMode::WriteCreate)?;
                if let Some(n) = size {
                    fs.set_len(n)?;
                }
                Ok(fs)
            }
            Target::Null => Ok(null_stream()),
            Target::Zero(_) => Err(StorageError::InvalidMode("zero: cannot be written")),
        }
    }
}

fn path_str(p: &std::path::Path) -> Result<String> {
    p.to_str()
        .map(str::to_string)
        .ok_or(StorageError::InvalidMode("path is not valid UTF-8"))
}
