use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::ring::{flush_coalesced, RingBuffer, TryPush};
use super::{DiskEngineMode, FileStream, Result, StorageError, StreamMode, WriteRequest};
use crate::census::{Census, ThreadRole};
use crate::transport::Waker;
use crate::wire::BlockDescriptor;

/// What happened to a request submitted to the engine.
#[derive(Debug)]
pub enum Completion {
    Read { block: BlockDescriptor, data: Vec<u8> },
    /// `buffer` is the request's data, handed back for reuse.
    Written { block: BlockDescriptor, buffer: Vec<u8> },
    Failed(StorageError),
}

#[derive(Debug)]
pub enum ReadOutcome {
    Ready(Vec<u8>),
    /// Will arrive later as [`Completion::Read`].
    Pending,
}

#[derive(Debug)]
pub enum WriteOutcome {
    /// Written inline; the buffer comes back immediately.
    Done(Vec<u8>),
    /// Queued for the disk thread; completes as [`Completion::Written`].
    Queued,
    /// Ring full; retry once the engine reports disk-ready again.
    Full(WriteRequest),
}

/// One drained batch as seen by the disk thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRecord {
    /// (offset, length) in drain order.
    pub batch: Vec<(u64, usize)>,
    pub repositionings: usize,
}

/// Counters readable from any thread while the engine runs.
#[derive(Debug, Default)]
pub struct EngineStats {
    pub bytes_read: AtomicU64,
    pub bytes_written: AtomicU64,
    pub repositionings: AtomicU64,
    pub batches: AtomicU64,
    log: Mutex<Vec<BatchRecord>>,
}

impl EngineStats {
    pub fn repositionings(&self) -> u64 {
        self.repositionings.load(Ordering::Relaxed)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written.load(Ordering::Relaxed)
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn batch_log(&self) -> Vec<BatchRecord> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

type Prefetched = std::result::Result<(BlockDescriptor, Vec<u8>), StorageError>;

enum Inner {
    Sync(FileStream),
    Writer {
        ring: Arc<RingBuffer<WriteRequest>>,
        done: Arc<Mutex<VecDeque<Completion>>>,
        thread: Option<JoinHandle<FileStream>>,
    },
    Reader {
        ring: Arc<RingBuffer<Prefetched>>,
        requested: VecDeque<BlockDescriptor>,
        thread: Option<JoinHandle<()>>,
    },
}

/// The session's bridge to storage.
pub struct DiskEngine {
    mode: DiskEngineMode,
    inner: Inner,
    stats: Arc<EngineStats>,
    spare: Vec<Vec<u8>>,
    queued: usize,
    failed: bool,
}

impl DiskEngine {
    pub fn sync(fs: FileStream) -> DiskEngine {
        DiskEngine {
            mode: DiskEngineMode::Sync,
            inner: Inner::Sync(fs),
            stats: Arc::default(),
            spare: Vec::new(),
            queued: 0,
            failed: false,
        }
    }

    /// Spawn a disk thread that flushes queued writes to `fs`.
    pub fn async_writer(
        mut fs: FileStream,
        slots: usize,
        census: &Census,
        waker: Waker,
    ) -> Result<DiskEngine> {
        if fs.mode() != StreamMode::WriteCreate {
            return Err(StorageError::InvalidMode("async writer needs a write stream"));
        }
        let ring = Arc::new(RingBuffer::<WriteRequest>::new(slots));
        let done = Arc::new(Mutex::new(VecDeque::new()));
        let stats = Arc::new(EngineStats::default());
        let thread = {
            let (ring, done, stats) = (ring.clone(), done.clone(), stats.clone());
            census.spawn(ThreadRole::Disk, "xdfs-disk-w".into(), move || {
                while ring.wait_nonempty(None) {
                    let outcome = flush_coalesced(&ring, &mut fs);
                    let mut q = done.lock().unwrap_or_else(|p| p.into_inner());
                    match outcome {
                        Ok(report) => {
                            stats.bytes_written.fetch_add(report.bytes, Ordering::Relaxed);
                            stats
                                .repositionings
                                .fetch_add(report.repositionings as u64, Ordering::Relaxed);
                            stats.batches.fetch_add(1, Ordering::Relaxed);
                            stats
                                .log
                                .lock()
                                .unwrap_or_else(|p| p.into_inner())
                                .push(BatchRecord {
                                    batch: report.batch,
                                    repositionings: report.repositionings,
                                });
                            for w in report.written {
                                let block = BlockDescriptor {
                                    offset: w.offset,
                                    length: w.data.len() as u32,
                                };
                                q.push_back(Completion::Written {
                                    block,
                                    buffer: w.data,
                                });
                            }
                        }
                        Err(e) => {
                            q.push_back(Completion::Failed(e));
                            ring.close();
                            drop(q);
                            waker.wake();
                            break;
                        }
                    }
                    drop(q);
                    waker.wake();
                }
                fs
            })?
        };
        Ok(DiskEngine {
            mode: DiskEngineMode::Async,
            inner: Inner::Writer {
                ring,
                done,
                thread: Some(thread),
            },
            stats,
            spare: Vec::new(),
            queued: 0,
            failed: false,
        })
    }

    /// Spawn a disk thread that reads `plan` in order ahead of demand.
    /// Reads must later be requested in exactly that order.
    pub fn async_reader(
        mut fs: FileStream,
        plan: Vec<BlockDescriptor>,
        slots: usize,
        census: &Census,
        waker: Waker,
    ) -> Result<DiskEngine> {
        if fs.mode() != StreamMode::Read {
            return Err(StorageError::InvalidMode("async reader needs a read stream"));
        }
        let ring = Arc::new(RingBuffer::<Prefetched>::new(slots));
        let stats = Arc::new(EngineStats::default());
        let thread = {
            let (ring, stats) = (ring.clone(), stats.clone());
            census.spawn(ThreadRole::Disk, "xdfs-disk-r".into(), move || {
                for d in plan {
                    if !ring.wait_not_full() {
                        return;
                    }
                    let item = fs.read_block(d).map(|data| (d, data));
                    let failed = item.is_err();
                    if let Ok((_, data)) = &item {
                        stats
                            .bytes_read
                            .fetch_add(data.len() as u64, Ordering::Relaxed);
                    }
                    if ring.push(item).is_err() {
                        return;
                    }
                    waker.wake();
                    if failed {
                        return;
                    }
                }
            })?
        };
        Ok(DiskEngine {
            mode: DiskEngineMode::Async,
            inner: Inner::Reader {
                ring,
                requested: VecDeque::new(),
                thread: Some(thread),
            },
            stats,
            spare: Vec::new(),
            queued: 0,
            failed: false,
        })
    }

    pub fn mode(&self) -> DiskEngineMode {
        self.mode
    }

    pub fn stats(&self) -> Arc<EngineStats> {
        self.stats.clone()
    }

    /// Hand back a buffer this engine produced (a block read, or a write
    /// that completed) for reuse.
    pub fn recycle(&mut self, buf: Vec<u8>) {
        if self.spare.len() < 8 {
            self.spare.push(buf);
        }
    }

    /// A spare buffer, if any. Its contents are stale; callers overwrite
    /// or resize it.
    pub fn take_buffer(&mut self) -> Vec<u8> {
        self.spare.pop().unwrap_or_default()
    }

    /// Whether another request can be accepted without back-pressure.
    pub fn is_disk_ready(&self) -> bool {
        match &self.inner {
            Inner::Sync(_) => true,
            Inner::Writer { ring, .. } => !ring.is_full() && !ring.is_closed(),
            Inner::Reader { .. } => true,
        }
    }

    /// Requests submitted but not yet completed.
    pub fn in_flight(&self) -> usize {
        match &self.inner {
            Inner::Sync(_) => 0,
            Inner::Writer { .. } => self.queued,
            Inner::Reader { requested, .. } => requested.len(),
        }
    }

    pub fn read_block(&mut self, d: BlockDescriptor) -> Result<ReadOutcome> {
        match &mut self.inner {
            Inner::Sync(fs) => {
                let mut buf = self.spare.pop().unwrap_or_default();
                fs.reread_block_into(d, &mut buf)?;
                self.stats
                    .bytes_read
                    .fetch_add(buf.len() as u64, Ordering::Relaxed);
                Ok(ReadOutcome::Ready(buf))
            }
            Inner::Reader { requested, .. } => {
                requested.push_back(d);
                Ok(ReadOutcome::Pending)
            }
            Inner::Writer { .. } => Err(StorageError::InvalidMode("read on a write engine")),
        }
    }

    pub fn write_block(&mut self, w: WriteRequest) -> Result<WriteOutcome> {
        match &mut self.inner {
            Inner::Sync(fs) => {
                fs.write_at(w.offset, &w.data)?;
                self.stats
                    .bytes_written
                    .fetch_add(w.data.len() as u64, Ordering::Relaxed);
                // Each inline write is its own positional run.
                self.stats.repositionings.fetch_add(1, Ordering::Relaxed);
                Ok(WriteOutcome::Done(w.data))
            }
            Inner::Writer { ring, .. } => match ring.try_push(w) {
                Ok(()) => {
                    self.queued += 1;
                    Ok(WriteOutcome::Queued)
                }
                Err(TryPush::Full(w)) => Ok(WriteOutcome::Full(w)),
                Err(TryPush::Closed(_)) => Err(StorageError::BufferClosed),
            },
            Inner::Reader { .. } => Err(StorageError::InvalidMode("write on a read engine")),
        }
    }

    /// Collect finished asynchronous requests. Sync engines never have any.
    pub fn poll_completions(&mut self) -> Vec<Completion> {
        let mut out = Vec::new();
        match &mut self.inner {
            Inner::Sync(_) => {}
            Inner::Writer { done, .. } => {
                out.extend(done.lock().unwrap_or_else(|p| p.into_inner()).drain(..));
                let written = out
                    .iter()
                    .filter(|c| matches!(c, Completion::Written { .. }))
                    .count();
                self.queued -= written;
            }
            Inner::Reader { ring, requested, .. } => {
                while !requested.is_empty() && !self.failed {
                    let Some(item) = ring.try_pop() else { break };
                    let want = requested.pop_front().expect("non-empty");
                    match item {
                        Ok((block, data)) if block == want => {
                            out.push(Completion::Read { block, data })
                        }
                        Ok((block, _)) => {
                            self.failed = true;
                            out.push(Completion::Failed(StorageError::EngineFailed(format!(
                                "prefetch produced {block}, session asked for {want}"
                            ))));
                        }
                        Err(e) => {
                            self.failed = true;
                            out.push(Completion::Failed(e));
                        }
                    }
                }
            }
        }
        out
    }

    /// Drain outstanding work, stop the disk thread and report totals.
    /// Completions not yet polled are discarded.
    pub fn finish(mut self) -> Result<Arc<EngineStats>> {
        let failure = self.shutdown();
        match failure {
            Some(e) => Err(e),
            None => Ok(self.stats.clone()),
        }
    }

    fn shutdown(&mut self) -> Option<StorageError> {
        match &mut self.inner {
            Inner::Sync(_) => None,
            Inner::Writer { ring, done, thread } => {
                ring.close();
                let joined = thread.take().map(|t| t.join());
                let mut q = done.lock().unwrap_or_else(|p| p.into_inner());
                let failure = q.drain(..).find_map(|c| match c {
                    Completion::Failed(e) => Some(e),
                    _ => None,
                });
                match joined {
                    Some(Err(_)) => Some(StorageError::EngineFailed("disk thread panicked".into())),
                    _ => failure,
                }
            }
            Inner::Reader { ring, thread, .. } => {
                ring.close();
                // Unblock a producer parked on a full ring.
                while ring.try_pop().is_some() {}
                match thread.take().map(|t| t.join()) {
                    Some(Err(_)) => Some(StorageError::EngineFailed("disk thread panicked".into())),
                    _ => None,
                }
            }
        }
    }
}

impl Drop for DiskEngine {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

impl std::fmt::Debug for DiskEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiskEngine").field("mode", &self.mode).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{null_stream, open_stream, zero_stream};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bd(offset: u64, length: u32) -> BlockDescriptor {
        BlockDescriptor { offset, length }
    }

    fn drain_writes(engine: &mut DiskEngine, mut pending: usize) {
        while pending > 0 {
            for c in engine.poll_completions() {
                match c {
                    Completion::Written { .. } => pending -= 1,
                    other => panic!("unexpected {other:?}"),
                }
            }
            std::thread::yield_now();
        }
    }

    #[test]
    fn sync_write_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let name = p.to_str().unwrap();
        let mut e = DiskEngine::sync(open_stream(name, StreamMode::WriteCreate).unwrap());
        assert!(matches!(
            e.write_block(WriteRequest::new(0, b"abcd".to_vec()).unwrap()).unwrap(),
            WriteOutcome::Done(_)
        ));
        e.finish().unwrap();
        let mut r = DiskEngine::sync(open_stream(name, StreamMode::Read).unwrap());
        match r.read_block(bd(0, 4)).unwrap() {
            ReadOutcome::Ready(d) => assert_eq!(d, b"abcd"),
            ReadOutcome::Pending => panic!("sync read pending"),
        }
    }

    #[test]
    fn async_random_order_matches_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut reqs = Vec::new();
        let mut off = 0u64;
        for _ in 0..1000 {
            let len = rng.gen_range(1..300usize);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            reqs.push(WriteRequest::new(off, data).unwrap());
            off += len as u64 + rng.gen_range(0..3u64);
        }
        let mut image = vec![0u8; off as usize];
        for r in &reqs {
            image[r.offset as usize..r.end() as usize].copy_from_slice(&r.data);
        }
        let last_end = reqs.iter().map(|r| r.end()).max().unwrap() as usize;
        image.truncate(last_end);
        reqs.shuffle(&mut rng);

        let census = Census::new();
        let fs = open_stream(p.to_str().unwrap(), StreamMode::WriteCreate).unwrap();
        let mut e = DiskEngine::async_writer(fs, 8, &census, Waker::new().unwrap()).unwrap();
        assert_eq!(census.threads_of(ThreadRole::Disk), 1);
        let total = reqs.len();
        for mut r in reqs {
            while let WriteOutcome::Full(back) = e.write_block(r).unwrap() {
                r = back;
                std::thread::yield_now();
            }
        }
        drain_writes(&mut e, total);
        let stats = e.finish().unwrap();
        assert_eq!(census.threads_of(ThreadRole::Disk), 0);
        assert_eq!(std::fs::read(&p).unwrap(), image);
        let log = stats.batch_log();
        assert_eq!(log.iter().map(|b| b.batch.len()).sum::<usize>(), total);
        assert_eq!(
            stats.repositionings(),
            log.iter().map(|b| b.repositionings as u64).sum::<u64>()
        );
    }

    #[test]
    fn async_reader_prefetches_in_plan_order() {
        let plan: Vec<_> = (0..10).map(|i| bd(i * 100, 100)).collect();
        let census = Census::new();
        let mut e =
            DiskEngine::async_reader(zero_stream(950), plan.clone(), 2, &census, Waker::new().unwrap())
                .unwrap();
        let mut got = Vec::new();
        for d in &plan {
            assert!(matches!(e.read_block(*d).unwrap(), ReadOutcome::Pending));
        }
        while got.len() < plan.len() {
            for c in e.poll_completions() {
                match c {
                    Completion::Read { block, data } => got.push((block, data.len())),
                    other => panic!("{other:?}"),
                }
            }
        }
        assert_eq!(got[9], (bd(900, 100), 50));
        e.finish().unwrap();
        assert_eq!(census.threads(), 0);
    }

    #[test]
    fn dropping_a_busy_reader_joins_its_thread() {
        let plan: Vec<_> = (0..100).map(|i| bd(i * 10, 10)).collect();
        let census = Census::new();
        let e = DiskEngine::async_reader(zero_stream(1000), plan, 1, &census, Waker::new().unwrap())
            .unwrap();
        drop(e);
        assert_eq!(census.threads(), 0);
    }

    #[test]
    fn full_ring_reports_not_ready() {
        let census = Census::new();
        let mut e = DiskEngine::async_writer(null_stream(), 1, &census, Waker::new().unwrap()).unwrap();
        let mut accepted = 0;
        for i in 0..10_000u64 {
            match e.write_block(WriteRequest::new(i, vec![0]).unwrap()).unwrap() {
                WriteOutcome::Full(_) => break,
                _ => accepted += 1,
            }
        }
        // The disk thread may keep up; either way the bookkeeping balances.
        let mut done = 0;
        while done < accepted {
            done += e.poll_completions().len();
        }
        assert_eq!(e.in_flight(), 0);
        e.finish().unwrap();
    }
}
