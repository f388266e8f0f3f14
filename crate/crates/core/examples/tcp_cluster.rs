//! Manager and storage behind TCP listeners; two nodes connect and the
//! revocation travels back over node 1's own connection.

use leasefs::client::ClientConfig;
use leasefs::manager::{Manager, ManagerConfig};
use leasefs::storage::StorageNode;
use leasefs::tcp::{connect_node, TcpServer};
use leasefs::types::{CacheMode, NodeId};

pub fn main() -> Result<(), Box<dyn std::error::Error>> {
    let storage = TcpServer::serve("127.0.0.1:0", StorageNode::in_memory(0))?;
    let manager = Manager::new(ManagerConfig::default());
    let front = TcpServer::serve_manager("127.0.0.1:0", manager.clone())?;
    println!("manager {} storage {}", front.local_addr(), storage.local_addr());

    let cfg = ClientConfig::new(CacheMode::WriteBackLease);
    let a = connect_node(NodeId(1), cfg, front.local_addr(), &[storage.local_addr()])?;
    let b = connect_node(NodeId(2), cfg, front.local_addr(), &[storage.local_addr()])?;

    let fa = a.open("over-tcp", true)?;
    a.write(fa, 0, b"sent over sockets")?;
    let fb = b.open("over-tcp", false)?;
    println!("node 2 reads {:?}", String::from_utf8_lossy(&b.read(fb, 0, 17)?));
    print!("{}", manager.dump());
    a.shutdown();
    b.shutdown();
    Ok(())
}
