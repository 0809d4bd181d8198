//! Runtime accounting of live threads and open channel streams.
//!
//! Every thread the runtime starts goes through [`Census::spawn`] and every
//! stream can carry a [`StreamGuard`], so tests can compare live counts
//! against the expected thread formulas and detect leaked connections.

use std::fmt;
use std::io;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThreadRole {
    Listener,
    Waiter,
    Common,
    Session,
    Disk,
}

impl ThreadRole {
    const ALL: [ThreadRole; 5] = [
        ThreadRole::Listener,
        ThreadRole::Waiter,
        ThreadRole::Common,
        ThreadRole::Session,
        ThreadRole::Disk,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Default)]
struct Inner {
    threads: [AtomicUsize; 5],
    streams: AtomicUsize,
}

#[derive(Clone, Default)]
pub struct Census {
    inner: Arc<Inner>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CensusSnapshot {
    pub listener: usize,
    pub waiter: usize,
    pub common: usize,
    pub session: usize,
    pub disk: usize,
    pub streams: usize,
}

impl CensusSnapshot {
    pub fn threads(&self) -> usize {
        self.listener + self.waiter + self.common + self.session + self.disk
    }
}

impl Census {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn threads(&self) -> usize {
        ThreadRole::ALL.iter().map(|r| self.threads_of(*r)).sum()
    }

    pub fn threads_of(&self, role: ThreadRole) -> usize {
        self.inner.threads[role.slot()].load(Ordering::SeqCst)
    }

    pub fn streams(&self) -> usize {
        self.inner.streams.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> CensusSnapshot {
        CensusSnapshot {
            listener: self.threads_of(ThreadRole::Listener),
            waiter: self.threads_of(ThreadRole::Waiter),
            common: self.threads_of(ThreadRole::Common),
            session: self.threads_of(ThreadRole::Session),
            disk: self.threads_of(ThreadRole::Disk),
            streams: self.streams(),
        }
    }

    /// Spawn a named thread that is counted until its closure returns.
    pub fn spawn<F, T>(&self, role: ThreadRole, name: String, f: F) -> io::Result<JoinHandle<T>>
    where
        F: FnOnce() -> T + Send + 'static,
        T: Send + 'static,
    {
        // Counted before the OS thread exists so a caller that observes the
        // spawn returning also observes the count.
        let guard = ThreadGuard::new(self.clone(), role);
        thread::Builder::new().name(name).spawn(move || {
            let _guard = guard;
            f()
        })
    }

    pub fn track_stream(&self) -> StreamGuard {
        self.inner.streams.fetch_add(1, Ordering::SeqCst);
        StreamGuard {
            census: self.clone(),
        }
    }
}

impl fmt::Debug for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.snapshot().fmt(f)
    }
}

struct ThreadGuard {
    census: Census,
    role: ThreadRole,
}

impl ThreadGuard {
    fn new(census: Census, role: ThreadRole) -> Self {
        census.inner.threads[role.slot()].fetch_add(1, Ordering::SeqCst);
        ThreadGuard { census, role }
    }
}

impl Drop for ThreadGuard {
    fn drop(&mut self) {
        self.census.inner.threads[self.role.slot()].fetch_sub(1, Ordering::SeqCst);
    }
}

/// Decrements the owning census' stream count on drop.
pub struct StreamGuard {
    census: Census,
}

impl Drop for StreamGuard {
    fn drop(&mut self) {
        self.census.inner.streams.fetch_sub(1, Ordering::SeqCst);
    }
}

impl fmt::Debug for StreamGuard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StreamGuard")
    }
}
