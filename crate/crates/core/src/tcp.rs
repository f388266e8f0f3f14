//! Framed RPC over TCP.
//!
//! One connection carries traffic both ways: each side may issue requests,
//! and replies are matched to callers by request id. The lease manager
//! reuses the connection a node opened to send that node its revocations,
//! registering it when the node first speaks.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, OnceLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use crate::client::{ClientConfig, ClientNode};
use crate::manager::Manager;
use crate::probe::Probes;
use crate::storage::StorageClient;
use crate::transport::{Endpoint, LateService, Service, TransportError};
use crate::types::NodeId;
use crate::wire::{decode_message, encode_message, ErrorCode, WireMessage, MAX_FRAME};

pub const CALL_TIMEOUT: Duration = Duration::from_secs(60);

pub struct TcpPeer {
    stream: TcpStream,
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u64, mpsc::SyncSender<WireMessage>>>,
    next_req: AtomicU64,
    closed: AtomicBool,
    service: OnceLock<Arc<dyn Service>>,
    timeout: Duration,
}

impl TcpPeer {
    /// Wraps `stream` without starting its reader.
    fn new(stream: TcpStream) -> io::Result<Arc<Self>> {
        stream.set_nodelay(true)?;
        Ok(Arc::new(TcpPeer {
            writer: Mutex::new(stream.try_clone()?),
            stream,
            pending: Mutex::new(HashMap::new()),
            next_req: AtomicU64::new(1),
            closed: AtomicBool::new(false),
            service: OnceLock::new(),
            timeout: CALL_TIMEOUT,
        }))
    }

    /// Connects to `addr`; requests arriving from the other side go to
    /// `service`.
    pub fn connect(addr: impl ToSocketAddrs, service: Option<Arc<dyn Service>>) -> io::Result<Arc<Self>> {
        let peer = Self::new(TcpStream::connect(addr)?)?;
        if let Some(s) = service {
            let _ = peer.service.set(s);
        }
        peer.start()?;
        Ok(peer)
    }

    fn start(self: &Arc<Self>) -> io::Result<()> {
        let me = self.clone();
        let stream = self.stream.try_clone()?;
        std::thread::Builder::new()
            .name("tcp-reader".into())
            .spawn(move || me.read_loop(stream))?;
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    pub fn close(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }

    fn send(&self, msg: &WireMessage) -> io::Result<()> {
        let frame = encode_message(msg);
        self.writer.lock().write_all(&frame)
    }

    fn read_loop(self: Arc<Self>, mut stream: TcpStream) {
        loop {
            let msg = match read_frame(&mut stream) {
                Ok(m) => m,
                Err(e) => {
                    tracing::debug!(error = %e, "connection ended");
                    break;
                }
            };
            if msg.is_request() {
                let me = self.clone();
                std::thread::spawn(move || {
                    let req = msg.req();
                    let reply = match me.service.get() {
                        Some(s) => s.handle(msg),
                        None => WireMessage::error(req, ErrorCode::BadRequest, "peer serves no requests"),
                    };
                    if let Err(e) = me.send(&reply) {
                        tracing::debug!(error = %e, "reply lost");
                    }
                });
            } else if let Some(tx) = self.pending.lock().remove(&msg.req()) {
                let _ = tx.send(msg);
            }
        }
        self.closed.store(true, Ordering::Release);
        // dropping the senders wakes every waiting caller
        self.pending.lock().clear();
    }
}

fn read_frame(stream: &mut TcpStream) -> Result<WireMessage, TransportError> {
    let mut head = [0u8; 4];
    stream.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::Codec(crate::wire::WireError::MalformedFrame("frame too large")));
    }
    let mut frame = vec![0u8; 4 + len];
    frame[..4].copy_from_slice(&head);
    stream.read_exact(&mut frame[4..])?;
    Ok(decode_message(&frame)?)
}

impl Endpoint for TcpPeer {
    fn call(&self, mut msg: WireMessage) -> Result<WireMessage, TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let caller_req = msg.req();
        let req = self.next_req.fetch_add(1, Ordering::Relaxed);
        *msg.req_mut() = req;
        let (tx, rx) = mpsc::sync_channel(1);
        self.pending.lock().insert(req, tx);
        if let Err(e) = self.send(&msg) {
            self.pending.lock().remove(&req);
            return Err(e.into());
        }
        match rx.recv_timeout(self.timeout) {
            Ok(mut reply) => {
                *reply.req_mut() = caller_req;
                Ok(reply)
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.pending.lock().remove(&req);
                Err(TransportError::Timeout)
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

/// Accept loop handing each connection a service built for it.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn bind<F>(addr: impl ToSocketAddrs, factory: F) -> io::Result<Self>
    where
        F: Fn(&Arc<TcpPeer>) -> Arc<dyn Service> + Send + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept = std::thread::Builder::new().name(format!("accept-{addr}")).spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::Acquire) {
                    break;
                }
                let started = conn.and_then(|s| {
                    let peer = TcpPeer::new(s)?;
                    let _ = peer.service.set(factory(&peer));
                    peer.start()
                });
                if let Err(e) = started {
                    tracing::warn!(error = %e, "accept failed");
                }
            }
        })?;
        Ok(TcpServer {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    /// Serves the same `service` on every connection.
    pub fn serve(addr: impl ToSocketAddrs, service: Arc<dyn Service>) -> io::Result<Self> {
        Self::bind(addr, move |_| service.clone())
    }

    /// Serves `manager`, registering each connection as the revocation
    /// channel of the node that speaks on it.
    pub fn serve_manager(addr: impl ToSocketAddrs, manager: Arc<Manager>) -> io::Result<Self> {
        Self::bind(addr, move |peer| {
            Arc::new(ManagerFront {
                manager: manager.clone(),
                peer: Arc::downgrade(peer),
            })
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct ManagerFront {
    manager: Arc<Manager>,
    peer: Weak<TcpPeer>,
}

impl Service for ManagerFront {
    fn handle(&self, msg: WireMessage) -> WireMessage {
        let node = match &msg {
            WireMessage::GrantLease { node, .. } | WireMessage::RemoveOwner { node, .. } => Some(*node),
            _ => None,
        };
        if let (Some(node), Some(peer)) = (node, self.peer.upgrade()) {
            if !self.manager.is_registered(node) {
                self.manager.register_node(node, peer);
            }
        }
        self.manager.handle(msg)
    }
}

/// Builds a client node whose manager and storage live at TCP addresses.
pub fn connect_node(
    id: NodeId,
    cfg: ClientConfig,
    manager: impl ToSocketAddrs,
    storage: &[SocketAddr],
) -> io::Result<Arc<ClientNode>> {
    let revokes = Arc::new(LateService::default());
    let to_manager = TcpPeer::connect(manager, Some(revokes.clone() as Arc<dyn Service>))?;
    let mut eps: Vec<Arc<dyn Endpoint>> = Vec::new();
    for addr in storage {
        eps.push(TcpPeer::connect(addr, None)?);
    }
    let node = ClientNode::new(id, cfg, Arc::new(StorageClient::new(eps)), to_manager, Probes::new());
    revokes.bind(&node.revoke_service());
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manager::ManagerConfig;
    use crate::storage::StorageNode;
    use crate::types::{CacheMode, PageData};

    #[test]
    fn storage_over_tcp() {
        let node = StorageNode::in_memory(0);
        let server = TcpServer::serve("127.0.0.1:0", node.clone()).unwrap();
        let client = StorageClient::new(vec![TcpPeer::connect(server.local_addr(), None).unwrap()]);
        let gfi = client.create("a").unwrap();
        client.write_pages(gfi, &[(2, PageData::patterned(9))]).unwrap();
        assert_eq!(client.read_pages(gfi, &[2]).unwrap(), vec![PageData::patterned(9)]);
        assert_eq!(client.resolve("a").unwrap(), (gfi, 3 * 4096));
        assert!(client.resolve("b").is_err());
    }

    #[test]
    fn concurrent_calls_are_matched_to_callers() {
        let node = StorageNode::in_memory(0);
        let server = TcpServer::serve("127.0.0.1:0", node).unwrap();
        let peer = TcpPeer::connect(server.local_addr(), None).unwrap();
        let client = Arc::new(StorageClient::new(vec![peer]));
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let client = client.clone();
                s.spawn(move || {
                    let gfi = client.create(&format!("f{t}")).unwrap();
                    for i in 0..20 {
                        client.write_pages(gfi, &[(i, PageData::patterned(t * 100 + i))]).unwrap();
                        assert_eq!(client.read_pages(gfi, &[i]).unwrap()[0], PageData::patterned(t * 100 + i));
                    }
                });
            }
        });
    }

    #[test]
    fn closed_connection_fails_calls() {
        let node = StorageNode::in_memory(0);
        let mut server = TcpServer::serve("127.0.0.1:0", node).unwrap();
        let peer = TcpPeer::connect(server.local_addr(), None).unwrap();
        server.shutdown();
        peer.close();
        std::thread::sleep(Duration::from_millis(50));
        let r = peer.call(WireMessage::Resolve {
            req: 1,
            path: "x".into(),
        });
        assert!(r.is_err());
    }

    #[test]
    fn revocation_travels_back_over_the_node_connection() {
        let storage = StorageNode::in_memory(0);
        let st = TcpServer::serve("127.0.0.1:0", storage).unwrap();
        let manager = Manager::new(ManagerConfig::default());
        let ms = TcpServer::serve_manager("127.0.0.1:0", manager.clone()).unwrap();
        let mut cfg = ClientConfig::new(CacheMode::WriteBackLease);
        cfg.flusher = false;
        let a = connect_node(NodeId(1), cfg, ms.local_addr(), &[st.local_addr()]).unwrap();
        let b = connect_node(NodeId(2), cfg, ms.local_addr(), &[st.local_addr()]).unwrap();
        let fa = a.open("shared", true).unwrap();
        a.write(fa, 0, b"over tcp").unwrap();
        let fb = b.open("shared", false).unwrap();
        assert_eq!(b.read(fb, 0, 8).unwrap(), b"over tcp");
        assert_eq!(a.stats().revocations, 1);
        assert!(manager.dump().contains("revoke"));
    }
}
