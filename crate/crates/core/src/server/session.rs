use std::sync::{Arc, Mutex};

use super::{resolve, upload_size, Shared};
use crate::fsm::{Machine, MachineContext, MachineKind};
use crate::piod::{open_engine, DispatchConfig, Dispatcher, SessionOutcome, TransferCounters};
use crate::session::ActiveSession;
use crate::transport::Waker;
use crate::wire::Direction;

/// Body of a session thread.
pub(super) fn run(shared: Arc<Shared>, active: ActiveSession) {
    let id = active.session_id;
    let live = shared.open_slot(&active);
    shared.cfg.log.info(
        Some(id),
        format!(
            "active: {} {} over {} channels, block {}",
            active.direction, active.params.remote_file_name, active.params.channel_count, active.params.block_size
        ),
    );
    let error = match drive(&shared, active, live) {
        Ok(outcome) => outcome.error,
        Err(e) => Some(e),
    };
    shared.registry.mark_closed(id);
    match &error {
        None => shared.cfg.log.info(Some(id), "completed"),
        Some(e) => shared.cfg.log.error(Some(id), format!("failed: {e}")),
    }
    shared.close_slot(id, error);
}

fn drive(
    shared: &Shared,
    active: ActiveSession,
    live: Arc<Mutex<TransferCounters>>,
) -> Result<SessionOutcome, String> {
    let cfg = &shared.cfg;
    let req = &active.params;
    let (n, bs) = (req.channel_count, req.block_size);
    let kind = MachineKind::for_role(true, active.direction);
    // Admission already checked overwrite; the session itself creates the file.
    let (target, _) = resolve(&cfg.root, &req.remote_file_name, active.direction, true)?;
    let (fs, ctx) = match active.direction {
        Direction::Download => {
            let fs = target.open_read().map_err(|e| e.to_string())?;
            let size = fs.size();
            (fs, MachineContext::sender(kind, n, size, bs))
        }
        Direction::Upload => {
            let size = upload_size(req)?;
            let fs = target.open_write(size).map_err(|e| e.to_string())?;
            (fs, MachineContext::receiver(kind, n, size))
        }
    };
    let waker = Waker::new().map_err(|e| e.to_string())?;
    let engine = open_engine(fs, cfg.disk_mode, kind.is_sender(), bs, &shared.census, waker.clone())
        .map_err(|e| e.to_string())?;
    let dcfg = DispatchConfig {
        idle_timeout: cfg.idle_timeout,
        close_grace: cfg.close_grace,
        poll_interval: cfg.poll_interval,
        max_block: bs,
    };
    let mut d = Dispatcher::new(active.streams, Machine::start(kind), ctx, engine, waker, dcfg);
    d.publish_to(live);
    d.register(&active.requests);
    let mut aborted = false;
    while !d.turn(cfg.poll_interval) {
        if !aborted && shared.abort_due() {
            d.abort("server shutting down");
            aborted = true;
        }
    }
    Ok(d.into_outcome())
}
