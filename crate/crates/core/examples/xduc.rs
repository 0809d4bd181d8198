//! The url-copy client.
//!
//! ```text
//! cargo run --example xduc -- xdfs://host:7070/data/big.bin big.bin -p 4
//! cargo run --example xduc -- zero:1073741824 xdfs://host:7070/null: -p 8 --bs 4M
//! cargo run --example xduc -- xdfs://host:7070/zero:1G null: --bench --repeats 3 \
//!     --sweep 1,2,4,8 --out report.jsonl
//! ```
//!
//! Exit status: 0 on success, 2 on a usage error, 3 when the transfer fails.

fn main() {
    std::process::exit(xdfs::client::cli::main());
}
