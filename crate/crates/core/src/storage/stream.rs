use std::fs::{File, OpenOptions};
use std::io::{self, IoSlice};
use std::os::fd::AsRawFd;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Result, StorageError};
use crate::wire::BlockDescriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    Read,
    WriteCreate,
}

enum Kind {
    File(File),
    Zero,
    Null { count: Arc<AtomicU64> },
}

/// Positional byte stream over a file or a pseudo-device.
pub struct FileStream {
    kind: Kind,
    mode: StreamMode,
    path: String,
    size: u64,
    position: u64,
}

impl FileStream {
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    /// Readable size; for writable streams the largest end written so far.
    pub fn size(&self) -> u64 {
        match &self.kind {
            Kind::Null { count } => count.load(Ordering::Relaxed),
            _ => self.size,
        }
    }

    /// Offset just past the last positional read or write.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Shared byte counter for null streams.
    pub fn null_counter(&self) -> Option<Arc<AtomicU64>> {
        match &self.kind {
            Kind::Null { count } => Some(count.clone()),
            _ => None,
        }
    }

    pub fn read_block(&mut self, d: BlockDescriptor) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.read_block_into(d, &mut buf)?;
        Ok(buf)
    }

    /// Read `min(d.length, size - d.offset)` bytes at `d.offset` into `buf`,
    /// replacing its contents.
    pub fn read_block_into(&mut self, d: BlockDescriptor, buf: &mut Vec<u8>) -> Result<()> {
        if self.mode != StreamMode::Read {
            return Err(StorageError::InvalidMode("read on a write stream"));
        }
        if d.offset > self.size {
            return Err(StorageError::OutOfRange {
                offset: d.offset,
                size: self.size,
            });
        }
        let n = (d.length as u64).min(self.size - d.offset) as usize;
        match &self.kind {
            Kind::File(f) => {
                buf.resize(n, 0);
                f.read_exact_at(buf, d.offset)?;
            }
            Kind::Zero => {
                buf.clear();
                buf.resize(n, 0);
            }
            Kind::Null { .. } => unreachable!("null streams are write-only"),
        }
        self.position = d.offset + n as u64;
        Ok(())
    }

    /// Like `read_block_into`, for a `buf` that holds an earlier block of
    /// this same stream. A zero source then only fills what the buffer
    /// grows by instead of clearing it all again.
    pub fn reread_block_into(&mut self, d: BlockDescriptor, buf: &mut Vec<u8>) -> Result<()> {
        if matches!(self.kind, Kind::Zero) && d.offset <= self.size {
            let n = (d.length as u64).min(self.size - d.offset) as usize;
            buf.truncate(n);
            buf.resize(n, 0);
            self.position = d.offset + n as u64;
            return Ok(());
        }
        self.read_block_into(d, buf)
    }

    pub fn write_at(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.write_vectored_at(offset, &[data])
    }

    /// One positional gather write of `parts` laid out contiguously at `offset`.
    pub fn write_vectored_at(&mut self, offset: u64, parts: &[&[u8]]) -> Result<()> {
        if self.mode != StreamMode::WriteCreate {
            return Err(StorageError::InvalidMode("write on a read stream"));
        }
        let total: u64 = parts.iter().map(|p| p.len() as u64).sum();
        let end = offset
            .checked_add(total)
            .ok_or(StorageError::OutOfRange { offset, size: u64::MAX })?;
        match &self.kind {
            Kind::File(f) => pwritev_all(f, offset, parts)?,
            Kind::Null { count } => {
                count.fetch_add(total, Ordering::Relaxed);
            }
            Kind::Zero => unreachable!("zero streams are read-only"),
        }
        self.size = self.size.max(end);
        self.position = end;
        Ok(())
    }

    /// Pre-size a writable file (sparse where the filesystem allows).
    pub fn set_len(&mut self, len: u64) -> Result<()> {
        if let Kind::File(f) = &self.kind {
            if self.mode == StreamMode::WriteCreate {
                f.set_len(len)?;
                self.size = len;
            }
        }
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        if let Kind::File(f) = &self.kind {
            if self.mode == StreamMode::WriteCreate {
                f.sync_data()?;
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for FileStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileStream")
            .field("path", &self.path)
            .field("mode", &self.mode)
            .field("size", &self.size())
            .finish()
    }
}

fn pwritev_all(f: &File, mut offset: u64, parts: &[&[u8]]) -> io::Result<()> {
    const IOV_MAX: usize = 1024;
    let mut slices: Vec<IoSlice<'_>> = parts
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| IoSlice::new(p))
        .collect();
    let mut rest: &mut [IoSlice<'_>] = &mut slices;
    while !rest.is_empty() {
        let chunk = rest.len().min(IOV_MAX);
        let n = unsafe {
            libc::pwritev(
                f.as_raw_fd(),
                rest.as_ptr() as *const libc::iovec,
                chunk as libc::c_int,
                offset as libc::off_t,
            )
        };
        if n < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
        if n == 0 {
            return Err(io::ErrorKind::WriteZero.into());
        }
        offset += n as u64;
        IoSlice::advance_slices(&mut rest, n as usize);
    }
    Ok(())
}

pub fn open_stream(path: &str, mode: StreamMode) -> Result<FileStream> {
    let p = Path::new(path);
    let map = |e: io::Error| match e.kind() {
        io::ErrorKind::NotFound => StorageError::NotFound(path.to_string()),
        io::ErrorKind::PermissionDenied => StorageError::PermissionDenied(path.to_string()),
        _ => StorageError::Io(e),
    };
    let (file, size) = match mode {
        StreamMode::Read => {
            let f = File::open(p).map_err(map)?;
            let meta = f.metadata().map_err(map)?;
            if meta.is_dir() {
                return Err(StorageError::Io(io::Error::other(format!(
                    "{path} is a directory"
                ))));
            }
            (f, meta.len())
        }
        StreamMode::WriteCreate => {
            let f = OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(true)
                .open(p)
                .map_err(map)?;
            (f, 0)
        }
    };
    Ok(FileStream {
        kind: Kind::File(file),
        mode,
        path: path.to_string(),
        size,
        position: 0,
    })
}

/// Reads yield `total` zero bytes then end of file.
pub fn zero_stream(total: u64) -> FileStream {
    FileStream {
        kind: Kind::Zero,
        mode: StreamMode::Read,
        path: format!("zero:{total}"),
        size: total,
        position: 0,
    }
}

/// Accepts and discards all writes, counting bytes.
pub fn null_stream() -> FileStream {
    FileStream {
        kind: Kind::Null {
            count: Arc::new(AtomicU64::new(0)),
        },
        mode: StreamMode::WriteCreate,
        path: "null:".into(),
        size: 0,
        position: 0,
    }
}
