//! Encode one of each frame a channel carries and hex-dump it.

use std::error::Error;

use xdfs::session::{service_header, ClientParams};
use xdfs::wire::{self, BlockDescriptor, ChannelEvent, ChannelHeader, Direction, ExceptionHeader, NegotiationReply};

fn dump(title: &str, bytes: &[u8]) {
    println!("{title} ({} bytes)", bytes.len());
    for (i, row) in bytes.chunks(16).enumerate() {
        let hex: Vec<String> = row.iter().map(|b| format!("{b:02x}")).collect();
        let text: String = row
            .iter()
            .map(|&b| if b.is_ascii_graphic() || b == b' ' { b as char } else { '.' })
            .collect();
        println!("  {:04x}  {:<47}  {text}", i * 16, hex.join(" "));
    }
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut params = ClientParams::new(Direction::Download, 4, "/data/big.bin", 1 << 20);
    params.local_file_name = "big.bin".into();
    let req = params.request(2);

    dump("service selector", &service_header(ChannelEvent::Xftsm));
    let bytes = wire::encode_negotiation(&req)?;
    dump("negotiation request", &bytes);
    assert_eq!(wire::decode_negotiation(&bytes)?, req);

    dump("accepted reply", &wire::encode_reply(&NegotiationReply::accepted(req.session_id, 5 << 20))?);
    dump(
        "rejected reply",
        &wire::encode_reply(&NegotiationReply::rejected(req.session_id, "no such file: /data/big.bin"))?,
    );

    let block = ChannelHeader::block(ChannelEvent::Xftsm, BlockDescriptor::new(3 << 20, 1 << 20)?);
    dump("block header", &wire::encode_channel_header(&block)?);
    dump("end of transfer", &wire::encode_channel_header(&ChannelHeader::bare(ChannelEvent::Eoft))?);
    dump("ack", &wire::encode_exception(&ExceptionHeader::ok())?);
    dump("error", &wire::encode_exception(&ExceptionHeader::error(5, "disk full"))?);
    Ok(())
}

fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
