//! Parallel-stream file transfer over `n` duplex channels.

pub mod census;
pub mod client;
pub mod fsm;
pub mod piod;
pub mod server;
pub mod session;
pub mod storage;
pub mod transport;
pub mod wire;
