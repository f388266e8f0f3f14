//! Two nodes share a file under write-back leases. Node 1's write stays in
//! its kernel cache until node 2 asks for the page; the manager revokes
//! node 1, which flushes, and node 2 reads the new bytes.

use leasefs::cluster::{Cluster, ClusterConfig};
use leasefs::types::CacheMode;

pub fn main() -> leasefs::Result<()> {
    let cluster = Cluster::new(ClusterConfig::new(CacheMode::WriteBackLease, 2))?;
    let (a, b) = (cluster.node(1), cluster.node(2));

    let fa = a.open("notes.txt", true)?;
    a.write(fa, 0, b"hello from node 1")?;
    println!("node 1 lease after write: {}", a.lease(a.gfi(fa)?));
    println!("node 1 round trips so far: {}", a.stats().round_trips);

    let fb = b.open("notes.txt", false)?;
    let got = b.read(fb, 0, 17)?;
    println!("node 2 reads: {:?}", String::from_utf8_lossy(&got));
    println!("node 1 lease after revocation: {}", a.lease(a.gfi(fa)?));
    println!("node 1 revocations handled: {}", a.stats().revocations);
    println!("grant log:\n{}", cluster.dump());
    Ok(())
}
