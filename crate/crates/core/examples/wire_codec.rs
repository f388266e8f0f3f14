//! Encodes a few protocol messages, shows the frame bytes and decodes them.

use leasefs::types::{Gfi, Intent, NodeId};
use leasefs::wire::{decode_message, encode_message, frame_len, WireMessage};

pub fn main() {
    let gfi = Gfi::new(0, 42);
    let msgs = [
        WireMessage::GrantLease {
            req: 1,
            gfi,
            intent: Intent::Write,
            node: NodeId(2),
        },
        WireMessage::GrantLeaseReply { req: 1, epoch: 17 },
        WireMessage::Revoke { req: 9, gfi, epoch: 17 },
        WireMessage::RevokeReply { req: 9, ok: true },
    ];
    for m in msgs {
        let frame = encode_message(&m);
        let hex: Vec<String> = frame.iter().map(|b| format!("{b:02x}")).collect();
        println!("{m:?}\n  {} bytes (frame_len {:?}): {}", frame.len(), frame_len(&frame), hex.join(" "));
        assert_eq!(decode_message(&frame).unwrap(), m);
    }
}
