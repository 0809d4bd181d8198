use std::collections::BTreeMap;

use crate::wire::BlockDescriptor;

/// Hands out file blocks in ascending offset order to whichever channel
/// asks next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockScheduler {
    file_size: u64,
    block_size: u64,
    next_offset: u64,
    in_flight: BTreeMap<u16, BlockDescriptor>,
    completed: u64,
}

impl BlockScheduler {
    /// `block_size` must be positive and fit a block length.
    pub fn new(file_size: u64, block_size: u64) -> Self {
        assert!(
            block_size > 0 && block_size <= u32::MAX as u64,
            "block size {block_size} out of range"
        );
        BlockScheduler {
            file_size,
            block_size,
            next_offset: 0,
            in_flight: BTreeMap::new(),
            completed: 0,
        }
    }

    pub fn file_size(&self) -> u64 {
        self.file_size
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    pub fn total_blocks(&self) -> u64 {
        self.file_size.div_ceil(self.block_size)
    }

    pub fn is_exhausted(&self) -> bool {
        self.next_offset >= self.file_size
    }

    pub fn next_block(&mut self) -> Option<BlockDescriptor> {
        if self.is_exhausted() {
            return None;
        }
        let length = self.block_size.min(self.file_size - self.next_offset);
        let d = BlockDescriptor {
            offset: self.next_offset,
            length: length as u32,
        };
        self.next_offset += length;
        Some(d)
    }

    /// Issue the next block to `channel`, which must not already hold one.
    pub fn assign(&mut self, channel: u16) -> Option<BlockDescriptor> {
        if self.in_flight.contains_key(&channel) {
            return None;
        }
        let d = self.next_block()?;
        self.in_flight.insert(channel, d);
        Some(d)
    }

    pub fn in_flight(&self, channel: u16) -> Option<BlockDescriptor> {
        self.in_flight.get(&channel).copied()
    }

    pub fn outstanding(&self) -> usize {
        self.in_flight.len()
    }

    /// Retire the block held by `channel`.
    pub fn complete(&mut self, channel: u16) -> Option<BlockDescriptor> {
        let d = self.in_flight.remove(&channel)?;
        self.completed += 1;
        Some(d)
    }

    /// Every descriptor still to be issued, in issue order.
    pub fn remaining_plan(&self) -> Vec<BlockDescriptor> {
        let mut probe = BlockScheduler {
            in_flight: BTreeMap::new(),
            ..self.clone()
        };
        std::iter::from_fn(|| probe.next_block()).collect()
    }
}
