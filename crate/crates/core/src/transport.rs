//! Request/reply plumbing between nodes.
//!
//! Every RPC is a [`WireMessage`] exchanged with an [`Endpoint`]. The
//! in-process [`Loopback`] endpoint pushes each message through the frame
//! codec, so tests observe exactly the bytes a socket would carry; the TCP
//! transport lives in [`crate::tcp`].

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::wire::{self, WireError, WireMessage};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer unreachable")]
    Unreachable,
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for reply")]
    Timeout,
    #[error(transparent)]
    Codec(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Server side of an RPC: turns one request into one reply.
pub trait Service: Send + Sync {
    fn handle(&self, msg: WireMessage) -> WireMessage;
}

/// Client side of an RPC connection.
pub trait Endpoint: Send + Sync {
    fn call(&self, msg: WireMessage) -> Result<WireMessage, TransportError>;
}

/// Network reachability switch shared by the endpoints of one link.
#[derive(Debug)]
pub struct Link {
    up: AtomicBool,
}

impl Link {
    pub fn new() -> Arc<Self> {
        Arc::new(Link {
            up: AtomicBool::new(true),
        })
    }

    pub fn is_up(&self) -> bool {
        self.up.load(Ordering::Acquire)
    }

    pub fn set_up(&self, up: bool) {
        self.up.store(up, Ordering::Release);
    }
}

/// Keeps every request that crossed an endpoint, in send order.
#[derive(Debug, Default)]
pub struct Recorder {
    sent: Mutex<Vec<WireMessage>>,
}

impl Recorder {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn messages(&self) -> Vec<WireMessage> {
        self.sent.lock().clone()
    }

    pub fn tags(&self) -> Vec<u8> {
        self.sent.lock().iter().map(WireMessage::tag).collect()
    }

    pub fn clear(&self) {
        self.sent.lock().clear();
    }

    fn push(&self, msg: &WireMessage) {
        self.sent.lock().push(msg.clone());
    }
}

/// In-process endpoint with the ordering and failure semantics of a
/// reliable stream: calls either complete or fail with `Unreachable`.
pub struct Loopback {
    service: Arc<dyn Service>,
    link: Arc<Link>,
    latency: Duration,
    codec: bool,
    recorder: Option<Arc<Recorder>>,
    calls: AtomicU64,
}

impl Loopback {
    pub fn new(service: Arc<dyn Service>) -> Self {
        Loopback {
            service,
            link: Link::new(),
            latency: Duration::ZERO,
            codec: true,
            recorder: None,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_link(mut self, link: Arc<Link>) -> Self {
        self.link = link;
        self
    }

    /// Simulated round-trip time added to every call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Skip the encode/decode pass. Only for micro-benchmarks of the layers
    /// above the transport.
    pub fn without_codec(mut self) -> Self {
        self.codec = false;
        self
    }

    pub fn with_recorder(mut self, recorder: Arc<Recorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn link(&self) -> &Arc<Link> {
        &self.link
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn relay(&self, msg: WireMessage) -> Result<WireMessage, TransportError> {
        if self.codec {
            Ok(wire::decode_message(&wire::encode_message(&msg))?)
        } else {
            Ok(msg)
        }
    }
}

impl Endpoint for Loopback {
    fn call(&self, msg: WireMessage) -> Result<WireMessage, TransportError> {
        if !self.link.is_up() {
            return Err(TransportError::Unreachable);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(r) = &self.recorder {
            r.push(&msg);
        }
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let req = self.relay(msg)?;
        let reply = self.service.handle(req);
        // A partition that opens while the server works loses the reply.
        if !self.link.is_up() {
            return Err(TransportError::Unreachable);
        }
        self.relay(reply)
    }
}

/// Service whose target is bound after construction, for wiring cycles such
/// as a daemon that must exist before the connection that delivers its
/// revocations.
#[derive(Default)]
pub struct LateService {
    target: std::sync::OnceLock<std::sync::Weak<dyn Service>>,
}

impl LateService {
    pub fn bind(&self, target: &Arc<dyn Service>) {
        let _ = self.target.set(Arc::downgrade(target));
    }
}

impl Service for LateService {
    fn handle(&self, msg: WireMessage) -> WireMessage {
        match self.target.get().and_then(|w| w.upgrade()) {
            Some(s) => s.handle(msg),
            None => WireMessage::error(msg.req(), wire::ErrorCode::Internal, "service not bound"),
        }
    }
}
