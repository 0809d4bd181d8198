//! Bounded FIFO between the session thread and the disk thread, and the
//! coalescing flush that drains it.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use super::{FileStream, Result, StorageError, WriteRequest};

#[derive(Debug)]
pub enum TryPush<T> {
    Full(T),
    Closed(T),
}

struct State<T> {
    slots: VecDeque<T>,
    closed: bool,
}

/// Single-producer single-consumer circular buffer with blocking and
/// non-blocking ends.
pub struct RingBuffer<T> {
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "ring buffer capacity must be positive");
        RingBuffer {
            state: Mutex::new(State {
                slots: VecDeque::with_capacity(capacity),
                closed: false,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.occupancy() >= self.capacity
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Blocks while full.
    pub fn push(&self, item: T) -> Result<()> {
        let mut st = self.lock();
        loop {
            if st.closed {
                return Err(StorageError::BufferClosed);
            }
            if st.slots.len() < self.capacity {
                st.slots.push_back(item);
                self.not_empty.notify_one();
                return Ok(());
            }
            st = self.not_full.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn try_push(&self, item: T) -> std::result::Result<(), TryPush<T>> {
        let mut st = self.lock();
        if st.closed {
            return Err(TryPush::Closed(item));
        }
        if st.slots.len() >= self.capacity {
            return Err(TryPush::Full(item));
        }
        st.slots.push_back(item);
        self.not_empty.notify_one();
        Ok(())
    }

    pub fn try_pop(&self) -> Option<T> {
        let mut st = self.lock();
        let item = st.slots.pop_front();
        if item.is_some() {
            self.not_full.notify_one();
        }
        item
    }

    pub fn front_matches(&self, pred: impl FnOnce(&T) -> bool) -> bool {
        self.lock().slots.front().is_some_and(pred)
    }

    /// Remove up to `max` queued items without waiting.
    pub fn drain_now(&self, max: usize) -> Vec<T> {
        let mut st = self.lock();
        let n = st.slots.len().min(max);
        let out: Vec<T> = st.slots.drain(..n).collect();
        if !out.is_empty() {
            self.not_full.notify_all();
        }
        out
    }

    /// Wait until an item is queued or the buffer is closed. Returns `false`
    /// only when closed and empty, or when `timeout` elapses with nothing queued.
    pub fn wait_nonempty(&self, timeout: Option<Duration>) -> bool {
        let mut st = self.lock();
        loop {
            if !st.slots.is_empty() {
                return true;
            }
            if st.closed {
                return false;
            }
            match timeout {
                None => st = self.not_empty.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(t) => {
                    let (g, res) = self
                        .not_empty
                        .wait_timeout(st, t)
                        .unwrap_or_else(|p| p.into_inner());
                    st = g;
                    if res.timed_out() {
                        return !st.slots.is_empty();
                    }
                }
            }
        }
    }

    /// Block while full; `false` once closed.
    pub fn wait_not_full(&self) -> bool {
        let mut st = self.lock();
        while !st.closed && st.slots.len() >= self.capacity {
            st = self.not_full.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        !st.closed
    }

    /// Reject further pushes; queued items stay poppable.
    pub fn close(&self) {
        let mut st = self.lock();
        st.closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }
}

/// Result of one coalescing flush.
#[derive(Debug, Default)]
pub struct FlushReport {
    pub requests: usize,
    /// Positional writes issued, one per maximal contiguous run.
    pub repositionings: usize,
    pub bytes: u64,
    /// (offset, length) of each drained request in FIFO order.
    pub batch: Vec<(u64, usize)>,
    /// The drained requests, handed back so callers can acknowledge them
    /// and recycle their buffers.
    pub written: Vec<WriteRequest>,
}

/// Drain whatever is queued in `rb` and write it to `fs`, merging requests
/// that are adjacent by offset into single positional gather writes.
pub fn flush_coalesced(rb: &RingBuffer<WriteRequest>, fs: &mut FileStream) -> Result<FlushReport> {
    let batch = rb.drain_now(rb.capacity());
    write_batch(batch, fs)
}

pub(crate) fn write_batch(batch: Vec<WriteRequest>, fs: &mut FileStream) -> Result<FlushReport> {
    let mut report = FlushReport {
        requests: batch.len(),
        batch: batch.iter().map(|w| (w.offset, w.data.len())).collect(),
        ..Default::default()
    };
    if batch.is_empty() {
        return Ok(report);
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch[i].offset);
    let overlapping = order
        .windows(2)
        .any(|w| batch[w[1]].offset < batch[w[0]].end());
    if overlapping {
        // Later requests must win on overlap, so keep arrival order.
        order = (0..batch.len()).collect();
    }

    let mut run_start = 0;
    while run_start < order.len() {
        let mut run_end = run_start + 1;
        while run_end < order.len()
            && batch[order[run_end]].offset == batch[order[run_end - 1]].end()
        {
            run_end += 1;
        }
        let parts: Vec<&[u8]> = order[run_start..run_end]
            .iter()
            .map(|&i| batch[i].data.as_slice())
            .collect();
        let offset = batch[order[run_start]].offset;
        fs.write_vectored_at(offset, &parts)?;
        report.repositionings += 1;
        report.bytes += parts.iter().map(|p| p.len() as u64).sum::<u64>();
        run_start = run_end;
    }
    report.written = batch;
    Ok(report)
}
