//! Print the four channel state machines as transition tables, then check
//! that each sender table is the dual of the receiver it talks to.

use std::error::Error;

use xdfs::fsm::{check_duality, table_for, DualityMapping, MachineKind};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    for kind in MachineKind::ALL {
        let table = table_for(kind);
        println!("{kind} ({} rules)", table.rules.len());
        for rule in &table.rules {
            println!("  {rule}");
        }
        println!();
    }
    for (a, b) in [
        (MachineKind::ServerDownload, MachineKind::ClientUpload),
        (MachineKind::ServerUpload, MachineKind::ClientDownload),
    ] {
        let mapping = DualityMapping::between(a, b).ok_or("no mapping")?;
        let report = check_duality(&table_for(a), &table_for(b), &mapping);
        println!("{a} ~ {b}: {} rules compared, {} mismatches", report.compared, report.mismatches.len());
        for m in &report.mismatches {
            println!("  {m}");
        }
        if !report.is_clean() {
            return Err(format!("{a} and {b} are not dual").into());
        }
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
