//! Length-prefixed binary framing for every RPC in the system.
//!
//! A frame is a 4-byte little-endian body length followed by the body. The
//! body starts with a one-byte tag; the remaining fields are fixed-width
//! little-endian integers, length-prefixed byte arrays and strings, and
//! count-prefixed lists. A `Gfi` is `(u16, u64)`, a lease type or intent is a
//! single byte (`0=Null, 1=Read, 2=Write`). Odd tags are requests, even tags
//! (and `Error`) are replies.

use thiserror::Error;

use crate::types::{Gfi, Intent, LeaseType, NodeId};

/// Frames larger than this are rejected before any allocation is attempted.
pub const MAX_FRAME: usize = 64 << 20;

pub const TAG_RESOLVE: u8 = 1;
pub const TAG_RESOLVE_REPLY: u8 = 2;
pub const TAG_CREATE: u8 = 3;
pub const TAG_CREATE_REPLY: u8 = 4;
pub const TAG_READ_PAGES: u8 = 5;
pub const TAG_READ_PAGES_REPLY: u8 = 6;
pub const TAG_WRITE_PAGES: u8 = 7;
pub const TAG_WRITE_PAGES_REPLY: u8 = 8;
pub const TAG_GRANT_LEASE: u8 = 9;
pub const TAG_GRANT_LEASE_REPLY: u8 = 10;
pub const TAG_REMOVE_OWNER: u8 = 11;
pub const TAG_REMOVE_OWNER_REPLY: u8 = 12;
pub const TAG_REVOKE: u8 = 13;
pub const TAG_REVOKE_REPLY: u8 = 14;
pub const TAG_ERROR: u8 = 15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
}

use WireError::MalformedFrame;

/// Error categories carried by an `Error` reply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    NotFound,
    AlreadyExists,
    UnknownGfi,
    BadBlockSize,
    RevokeFailed,
    BadRequest,
    Internal,
}

impl ErrorCode {
    fn as_u8(self) -> u8 {
        match self {
            ErrorCode::NotFound => 1,
            ErrorCode::AlreadyExists => 2,
            ErrorCode::UnknownGfi => 3,
            ErrorCode::BadBlockSize => 4,
            ErrorCode::RevokeFailed => 5,
            ErrorCode::BadRequest => 6,
            ErrorCode::Internal => 7,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::NotFound,
            2 => ErrorCode::AlreadyExists,
            3 => ErrorCode::UnknownGfi,
            4 => ErrorCode::BadBlockSize,
            5 => ErrorCode::RevokeFailed,
            6 => ErrorCode::BadRequest,
            7 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireMessage {
    Resolve {
        req: u64,
        path: String,
    },
    ResolveReply {
        req: u64,
        gfi: Gfi,
        length: u64,
    },
    Create {
        req: u64,
        path: String,
    },
    CreateReply {
        req: u64,
        gfi: Gfi,
    },
    ReadPages {
        req: u64,
        gfi: Gfi,
        indices: Vec<u64>,
    },
    ReadPagesReply {
        req: u64,
        pages: Vec<Vec<u8>>,
    },
    WritePages {
        req: u64,
        gfi: Gfi,
        pages: Vec<(u64, Vec<u8>)>,
    },
    WritePagesReply {
        req: u64,
    },
    GrantLease {
        req: u64,
        gfi: Gfi,
        intent: Intent,
        node: NodeId,
    },
    /// `epoch` identifies the ownership just granted; revocations name it.
    GrantLeaseReply {
        req: u64,
        epoch: u64,
    },
    RemoveOwner {
        req: u64,
        gfi: Gfi,
        node: NodeId,
    },
    RemoveOwnerReply {
        req: u64,
    },
    Revoke {
        req: u64,
        gfi: Gfi,
        epoch: u64,
    },
    RevokeReply {
        req: u64,
        ok: bool,
    },
    Error {
        req: u64,
        code: ErrorCode,
        message: String,
    },
}

impl WireMessage {
    pub fn req(&self) -> u64 {
        use WireMessage::*;
        match self {
            Resolve { req, .. }
            | ResolveReply { req, .. }
            | Create { req, .. }
            | CreateReply { req, .. }
            | ReadPages { req, .. }
            | ReadPagesReply { req, .. }
            | WritePages { req, .. }
            | WritePagesReply { req }
            | GrantLease { req, .. }
            | GrantLeaseReply { req, .. }
            | RemoveOwner { req, .. }
            | RemoveOwnerReply { req }
            | Revoke { req, .. }
            | RevokeReply { req, .. }
            | Error { req, .. } => *req,
        }
    }

    pub fn req_mut(&mut self) -> &mut u64 {
        use WireMessage::*;
        match self {
            Resolve { req, .. }
            | ResolveReply { req, .. }
            | Create { req, .. }
            | CreateReply { req, .. }
            | ReadPages { req, .. }
            | ReadPagesReply { req, .. }
            | WritePages { req, .. }
            | WritePagesReply { req }
            | GrantLease { req, .. }
            | GrantLeaseReply { req, .. }
            | RemoveOwner { req, .. }
            | RemoveOwnerReply { req }
            | Revoke { req, .. }
            | RevokeReply { req, .. }
            | Error { req, .. } => req,
        }
    }

    pub fn tag(&self) -> u8 {
        use WireMessage::*;
        match self {
            Resolve { .. } => TAG_RESOLVE,
            ResolveReply { .. } => TAG_RESOLVE_REPLY,
            Create { .. } => TAG_CREATE,
            CreateReply { .. } => TAG_CREATE_REPLY,
            ReadPages { .. } => TAG_READ_PAGES,
            ReadPagesReply { .. } => TAG_READ_PAGES_REPLY,
            WritePages { .. } => TAG_WRITE_PAGES,
            WritePagesReply { .. } => TAG_WRITE_PAGES_REPLY,
            GrantLease { .. } => TAG_GRANT_LEASE,
            GrantLeaseReply { .. } => TAG_GRANT_LEASE_REPLY,
            RemoveOwner { .. } => TAG_REMOVE_OWNER,
            RemoveOwnerReply { .. } => TAG_REMOVE_OWNER_REPLY,
            Revoke { .. } => TAG_REVOKE,
            RevokeReply { .. } => TAG_REVOKE_REPLY,
            Error { .. } => TAG_ERROR,
        }
    }

    pub fn is_request(&self) -> bool {
        is_request_tag(self.tag())
    }

    pub fn error(req: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::Error {
            req,
            code,
            message: message.into(),
        }
    }
}

pub fn is_request_tag(tag: u8) -> bool {
    tag % 2 == 1 && tag != TAG_ERROR
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn gfi(&mut self, g: Gfi) {
        self.u16(g.storage_node);
        self.u64(g.inode);
    }
    fn count(&mut self, n: usize) {
        self.u32(n as u32);
    }
}

/// Encodes one message as a complete frame, length prefix included.
pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(64));
    w.u32(0);
    w.u8(msg.tag());
    w.u64(msg.req());
    match msg {
        WireMessage::Resolve { path, .. } | WireMessage::Create { path, .. } => {
            w.bytes(path.as_bytes())
        }
        WireMessage::ResolveReply { gfi, length, .. } => {
            w.gfi(*gfi);
            w.u64(*length);
        }
        WireMessage::CreateReply { gfi, .. } => w.gfi(*gfi),
        WireMessage::ReadPages { gfi, indices, .. } => {
            w.gfi(*gfi);
            w.count(indices.len());
            for &i in indices {
                w.u64(i);
            }
        }
        WireMessage::ReadPagesReply { pages, .. } => {
            w.count(pages.len());
            for p in pages {
                w.bytes(p);
            }
        }
        WireMessage::WritePages { gfi, pages, .. } => {
            w.gfi(*gfi);
            w.count(pages.len());
            for (i, p) in pages {
                w.u64(*i);
                w.bytes(p);
            }
        }
        WireMessage::WritePagesReply { .. } | WireMessage::RemoveOwnerReply { .. } => {}
        WireMessage::GrantLease {
            gfi, intent, node, ..
        } => {
            w.gfi(*gfi);
            w.u8(intent.lease().as_u8());
            w.u32(node.0);
        }
        WireMessage::GrantLeaseReply { epoch, .. } => w.u64(*epoch),
        WireMessage::RemoveOwner { gfi, node, .. } => {
            w.gfi(*gfi);
            w.u32(node.0);
        }
        WireMessage::Revoke { gfi, epoch, .. } => {
            w.gfi(*gfi);
            w.u64(*epoch);
        }
        WireMessage::RevokeReply { ok, .. } => w.u8(*ok as u8),
        WireMessage::Error { code, message, .. } => {
            w.u8(code.as_u8());
            w.bytes(message.as_bytes());
        }
    }
    let body = (w.0.len() - 4) as u32;
    w.0[..4].copy_from_slice(&body.to_le_bytes());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(MalformedFrame("truncated body"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn string(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?).map_err(|_| MalformedFrame("string is not utf-8"))
    }
    fn gfi(&mut self) -> Result<Gfi, WireError> {
        Ok(Gfi::new(self.u16()?, self.u64()?))
    }
    /// List length, sanity-checked against remaining bytes so a hostile count
    /// cannot trigger a huge allocation.
    fn count(&mut self, min_item: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.len() {
            return Err(MalformedFrame("list count exceeds body"));
        }
        Ok(n)
    }
    fn intent(&mut self) -> Result<Intent, WireError> {
        LeaseType::from_u8(self.u8()?)
            .and_then(Intent::from_lease)
            .ok_or(MalformedFrame("bad intent"))
    }
}

/// Returns the total frame length (prefix included) if `buf` starts with a
/// complete frame header, without validating the body.
pub fn frame_len(buf: &[u8]) -> Option<usize> {
    let head: [u8; 4] = buf.get(..4)?.try_into().ok()?;
    Some(u32::from_le_bytes(head) as usize + 4)
}

/// Decodes exactly one frame. Trailing bytes, a short buffer, an unknown tag or
/// an out-of-range field value all yield `MalformedFrame`.
pub fn decode_message(frame: &[u8]) -> Result<WireMessage, WireError> {
    if frame.len() < 4 {
        return Err(MalformedFrame("missing length prefix"));
    }
    let body_len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    if body_len == 0 {
        return Err(MalformedFrame("empty body"));
    }
    if body_len > MAX_FRAME {
        return Err(MalformedFrame("frame too large"));
    }
    let body = &frame[4..];
    if body.len() < body_len {
        return Err(MalformedFrame("truncated frame"));
    }
    if body.len() > body_len {
        return Err(MalformedFrame("trailing bytes after frame"));
    }
    decode_body(body)
}

fn decode_body(body: &[u8]) -> Result<WireMessage, WireError> {
    let mut r = Reader { buf: body };
    let tag = r.u8()?;
    let req = r.u64()?;
    let msg = match tag {
        TAG_RESOLVE => WireMessage::Resolve {
            req,
            path: r.string()?,
        },
        TAG_RESOLVE_REPLY => WireMessage::ResolveReply {
            req,
            gfi: r.gfi()?,
            length: r.u64()?,
        },
        TAG_CREATE => WireMessage::Create {
            req,
            path: r.string()?,
        },
        TAG_CREATE_REPLY => WireMessage::CreateReply { req, gfi: r.gfi()? },
        TAG_READ_PAGES => {
            let gfi = r.gfi()?;
            let n = r.count(8)?;
            let indices = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
            WireMessage::ReadPages { req, gfi, indices }
        }
        TAG_READ_PAGES_REPLY => {
            let n = r.count(4)?;
            let pages = (0..n).map(|_| r.bytes()).collect::<Result<_, _>>()?;
            WireMessage::ReadPagesReply { req, pages }
        }
        TAG_WRITE_PAGES => {
            let gfi = r.gfi()?;
            let n = r.count(12)?;
            let pages = (0..n)
                .map(|_| Ok((r.u64()?, r.bytes()?)))
                .collect::<Result<_, WireError>>()?;
            WireMessage::WritePages { req, gfi, pages }
        }
        TAG_WRITE_PAGES_REPLY => WireMessage::WritePagesReply { req },
        TAG_GRANT_LEASE => WireMessage::GrantLease {
            req,
            gfi: r.gfi()?,
            intent: r.intent()?,
            node: NodeId(r.u32()?),
        },
        TAG_GRANT_LEASE_REPLY => WireMessage::GrantLeaseReply {
            req,
            epoch: r.u64()?,
        },
        TAG_REMOVE_OWNER => WireMessage::RemoveOwner {
            req,
            gfi: r.gfi()?,
            node: NodeId(r.u32()?),
        },
        TAG_REMOVE_OWNER_REPLY => WireMessage::RemoveOwnerReply { req },
        TAG_REVOKE => WireMessage::Revoke {
            req,
            gfi: r.gfi()?,
            epoch: r.u64()?,
        },
        TAG_REVOKE_REPLY => WireMessage::RevokeReply {
            req,
            ok: match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(MalformedFrame("bad bool")),
            },
        },
        TAG_ERROR => WireMessage::Error {
            req,
            code: ErrorCode::from_u8(r.u8()?).ok_or(MalformedFrame("bad error code"))?,
            message: r.string()?,
        },
        _ => return Err(MalformedFrame("unknown tag")),
    };
    if !r.buf.is_empty() {
        return Err(MalformedFrame("over-long body"));
    }
    Ok(msg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gfi() -> impl Strategy<Value = Gfi> {
        (any::<u16>(), any::<u64>()).prop_map(|(n, i)| Gfi::new(n, i))
    }

    fn blob() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(any::<u8>(), 0..64)
    }

    fn intent() -> impl Strategy<Value = Intent> {
        prop_oneof![Just(Intent::Read), Just(Intent::Write)]
    }

    fn code() -> impl Strategy<Value = ErrorCode> {
        prop_oneof![
            Just(ErrorCode::NotFound),
            Just(ErrorCode::AlreadyExists),
            Just(ErrorCode::UnknownGfi),
            Just(ErrorCode::BadBlockSize),
            Just(ErrorCode::RevokeFailed),
            Just(ErrorCode::BadRequest),
            Just(ErrorCode::Internal),
        ]
    }

    pub(crate) fn message() -> impl Strategy<Value = WireMessage> {
        let req = any::<u64>();
        prop_oneof![
            (req, ".{0,12}").prop_map(|(req, path)| WireMessage::Resolve { req, path }),
            (req, gfi(), any::<u64>())
                .prop_map(|(req, gfi, length)| WireMessage::ResolveReply { req, gfi, length }),
            (req, ".{0,12}").prop_map(|(req, path)| WireMessage::Create { req, path }),
            (req, gfi()).prop_map(|(req, gfi)| WireMessage::CreateReply { req, gfi }),
            (req, gfi(), prop::collection::vec(any::<u64>(), 0..6))
                .prop_map(|(req, gfi, indices)| WireMessage::ReadPages { req, gfi, indices }),
            (req, prop::collection::vec(blob(), 0..4))
                .prop_map(|(req, pages)| WireMessage::ReadPagesReply { req, pages }),
            (
                req,
                gfi(),
                prop::collection::vec((any::<u64>(), blob()), 0..4)
            )
                .prop_map(|(req, gfi, pages)| WireMessage::WritePages { req, gfi, pages }),
            req.prop_map(|req| WireMessage::WritePagesReply { req }),
            (req, gfi(), intent(), any::<u32>()).prop_map(|(req, gfi, intent, n)| {
                WireMessage::GrantLease {
                    req,
                    gfi,
                    intent,
                    node: NodeId(n),
                }
            }),
            (req, any::<u64>())
                .prop_map(|(req, epoch)| WireMessage::GrantLeaseReply { req, epoch }),
            (req, gfi(), any::<u32>()).prop_map(|(req, gfi, n)| {
                WireMessage::RemoveOwner {
                    req,
                    gfi,
                    node: NodeId(n),
                }
            }),
            req.prop_map(|req| WireMessage::RemoveOwnerReply { req }),
            (req, gfi(), any::<u64>())
                .prop_map(|(req, gfi, epoch)| WireMessage::Revoke { req, gfi, epoch }),
            (req, any::<bool>()).prop_map(|(req, ok)| WireMessage::RevokeReply { req, ok }),
            (req, code(), ".{0,12}").prop_map(|(req, code, message)| WireMessage::Error {
                req,
                code,
                message
            }),
        ]
    }

    #[test]
    fn revoke_frame_layout() {
        let frame = encode_message(&WireMessage::Revoke {
            req: 7,
            gfi: Gfi::new(0, 1),
            epoch: 3,
        });
        let body = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(body, frame.len() - 4);
        // tag, req, gfi (u16 + u64), epoch
        assert_eq!(body, 1 + 8 + 2 + 8 + 8);
        assert_eq!(frame[4], TAG_REVOKE);
        assert_eq!(&frame[5..13], &7u64.to_le_bytes());
        assert_eq!(&frame[13..15], &0u16.to_le_bytes());
        assert_eq!(&frame[15..23], &1u64.to_le_bytes());
    }

    #[test]
    fn grant_round_trip() {
        let m = WireMessage::GrantLease {
            req: 9,
            gfi: Gfi::new(2, 40),
            intent: Intent::Write,
            node: NodeId(5),
        };
        assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
    }

    #[test]
    fn degenerate_frames_are_rejected() {
        assert!(decode_message(&[]).is_err());
        assert!(decode_message(&[0, 0, 0, 0]).is_err());
        let mut f = encode_message(&WireMessage::WritePagesReply { req: 1 });
        f.push(0);
        assert!(decode_message(&f).is_err(), "trailing byte");
        let f = encode_message(&WireMessage::WritePagesReply { req: 1 });
        assert!(decode_message(&f[..f.len() - 1]).is_err(), "truncated");
        let mut bad = f.clone();
        bad[4] = 99;
        assert!(decode_message(&bad).is_err(), "unknown tag");
        // a body whose inner length field overruns
        let mut over = encode_message(&WireMessage::Resolve {
            req: 1,
            path: "ab".into(),
        });
        over[13] = 200;
        assert!(decode_message(&over).is_err());
    }

    #[test]
    fn request_reply_parity() {
        for tag in 1..=14u8 {
            assert_eq!(is_request_tag(tag), tag % 2 == 1);
        }
        assert!(!is_request_tag(TAG_ERROR));
    }

    proptest! {
        #[test]
        fn codec_round_trips(m in message()) {
            let frame = encode_message(&m);
            prop_assert_eq!(frame_len(&frame), Some(frame.len()));
            prop_assert_eq!(decode_message(&frame).unwrap(), m);
        }

        #[test]
        fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..80)) {
            let _ = decode_message(&bytes);
        }
    }
}
