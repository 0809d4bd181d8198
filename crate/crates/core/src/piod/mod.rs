//! Parallel I/O dispatch: the loop that turns socket and disk readiness into
//! state machine events and carries out the actions they produce.

mod dispatch;
mod scheduler;
mod simrun;
mod threads;

pub use dispatch::{
    co_run, run_session, ChannelCounters, DispatchConfig, DispatchLists, Dispatcher,
    SessionOutcome, TransferCounters,
};
pub use scheduler::BlockScheduler;
pub use simrun::{run_sim_transfer, seeded_bytes, SimTransfer, SimTransferResult};
pub use threads::{
    expected_server_census, expected_threads_hybrid, expected_threads_mt, expected_threads_mtedp,
};

use crate::census::Census;
use crate::storage::{self, DiskEngine, DiskEngineMode, FileStream, DEFAULT_RING_SLOTS};
use crate::transport::Waker;

/// Wrap `fs` in the engine `mode` asks for. A sender's async engine
/// prefetches the whole file in block order; a receiver's flushes writes.
pub fn open_engine(
    fs: FileStream,
    mode: DiskEngineMode,
    sender: bool,
    block_size: u64,
    census: &Census,
    waker: Waker,
) -> storage::Result<DiskEngine> {
    match (mode, sender) {
        (DiskEngineMode::Sync, _) => Ok(DiskEngine::sync(fs)),
        (DiskEngineMode::Async, true) => {
            let plan = BlockScheduler::new(fs.size(), block_size).remaining_plan();
            DiskEngine::async_reader(fs, plan, DEFAULT_RING_SLOTS, census, waker)
        }
        (DiskEngineMode::Async, false) => {
            DiskEngine::async_writer(fs, DEFAULT_RING_SLOTS, census, waker)
        }
    }
}
