//! Run a download over the deterministic simulated network and print what
//! both channel machines did. Same seed, same trace, every time.
//!
//! ```text
//! cargo run --example sim_trace -- [channels] [size] [seed]
//! ```

use std::error::Error;

use xdfs::piod::{run_sim_transfer, SimTransfer};
use xdfs::transport::Fragmentation;
use xdfs::wire::Direction;

pub fn run_example_with(channels: u16, size: u64, seed: u64) -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let mut t = SimTransfer::new(Direction::Download, channels, size, 4096);
    t.net.fragmentation = Fragmentation::RandomSplit;
    t.net.seed = seed;
    let r = run_sim_transfer(&t, dir.path())?;

    for (side, out) in [("server", &r.server), ("client", &r.client)] {
        println!("== {side}: {} transitions, ends {}", out.trace.entries.len(), out.machine);
        print!("{}", out.trace.to_text());
    }
    println!(
        "moved {} bytes in {} blocks, {} acks; content intact: {}",
        r.client.counters.payload_bytes,
        r.server.counters.blocks,
        r.server.counters.acks,
        r.intact()
    );
    if !r.intact() {
        return Err("simulated transfer failed".into());
    }
    Ok(())
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    run_example_with(2, 3 * 4096 + 17, 7)
}

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: u64| args.get(i).map_or(Ok(default), |s| s.parse::<u64>());
    run_example_with(arg(0, 2)? as u16, arg(1, 3 * 4096 + 17)?, arg(2, 7)?)
}
