use std::fmt::Write as _;

use super::{FsmAction, FsmEvent, Machine, MachineContext, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub before: Machine,
    pub event: FsmEvent,
    pub actions: Vec<FsmAction>,
    pub after: Machine,
}

impl TraceEntry {
    /// `before<TAB>event<TAB>actions<TAB>after`, actions joined by `;`
    /// (`-` when there are none).
    pub fn line(&self) -> String {
        let actions = if self.actions.is_empty() {
            "-".to_string()
        } else {
            self.actions
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        format!("{}\t{}\t{}\t{}", self.before, self.event, actions, self.after)
    }
}

/// Append-only record of every transition a machine took.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsmTrace {
    pub entries: Vec<TraceEntry>,
}

impl FsmTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn events(&self) -> Vec<FsmEvent> {
        self.entries.iter().map(|e| e.event.clone()).collect()
    }

    pub fn actions(&self) -> impl Iterator<Item = &FsmAction> {
        self.entries.iter().flat_map(|e| e.actions.iter())
    }

    pub fn last_state(&self) -> Option<Machine> {
        self.entries.last().map(|e| e.after)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}", e.line());
        }
        out
    }
}

/// Feed `events` through the machine from `start`. The resulting trace
/// equals the one that produced the events, since steps are pure.
pub fn replay(
    start: Machine,
    ctx: &MachineContext,
    events: &[FsmEvent],
) -> Result<(FsmTrace, Machine, MachineContext)> {
    let mut state = start;
    let mut ctx = ctx.clone();
    let mut trace = FsmTrace::new();
    for ev in events {
        let step = state.step(&ctx, ev)?;
        trace.push(TraceEntry {
            before: state,
            event: ev.clone(),
            actions: step.actions,
            after: step.state,
        });
        state = step.state;
        ctx = step.ctx;
    }
    Ok((trace, state, ctx))
}
