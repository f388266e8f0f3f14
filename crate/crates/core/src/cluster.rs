//! In-process deployment: storage nodes, the lease manager and N client
//! nodes wired over loopback links.

use std::path::PathBuf;
use std::sync::Arc;

use crate::client::{ClientConfig, ClientNode};
use crate::error::Result;
use crate::manager::{Manager, ManagerConfig};
use crate::probe::Probes;
use crate::storage::{StorageClient, StorageNode};
use crate::transport::{Endpoint, LateService, Link, Loopback, Recorder, Service};
use crate::types::{CacheMode, NodeId};

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub storage_nodes: usize,
    pub client: ClientConfig,
    pub manager: ManagerConfig,
    /// Persist storage under this directory instead of memory.
    pub storage_dir: Option<PathBuf>,
    /// Keep a copy of every message each node sends to the manager.
    pub record_manager_traffic: bool,
}

impl ClusterConfig {
    pub fn new(mode: CacheMode, nodes: usize) -> Self {
        ClusterConfig {
            nodes,
            storage_nodes: 1,
            client: ClientConfig::new(mode),
            manager: ManagerConfig::default(),
            storage_dir: None,
            record_manager_traffic: false,
        }
    }
}

pub struct Cluster {
    storage: Vec<Arc<StorageNode>>,
    manager: Arc<Manager>,
    nodes: Vec<Arc<ClientNode>>,
    links: Vec<Arc<Link>>,
    recorders: Vec<Arc<Recorder>>,
    probes: Arc<Probes>,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Result<Self> {
        let mut storage = Vec::new();
        for id in 0..cfg.storage_nodes.max(1) as u16 {
            storage.push(match &cfg.storage_dir {
                Some(dir) => StorageNode::open_dir(id, dir.join(format!("storage{id}")))?,
                None => StorageNode::in_memory(id),
            });
        }
        let manager = Manager::new(cfg.manager);
        let probes = Probes::new();
        let rpc = cfg.client.cost.rpc;
        let mut nodes = Vec::new();
        let mut links = Vec::new();
        let mut recorders = Vec::new();
        for i in 1..=cfg.nodes {
            let id = NodeId(i as u32);
            let storage_eps: Vec<Arc<dyn Endpoint>> = storage
                .iter()
                .map(|s| Arc::new(Loopback::new(s.clone()).with_latency(rpc)) as Arc<dyn Endpoint>)
                .collect();
            let link = Link::new();
            let recorder = Recorder::new();
            let mut to_manager = Loopback::new(manager.clone()).with_link(link.clone()).with_latency(rpc);
            if cfg.record_manager_traffic {
                to_manager = to_manager.with_recorder(recorder.clone());
            }
            let node = ClientNode::new(
                id,
                cfg.client,
                Arc::new(StorageClient::new(storage_eps)),
                Arc::new(to_manager),
                probes.clone(),
            );
            // weak back edge so the manager does not keep nodes alive
            let revokes = Arc::new(LateService::default());
            revokes.bind(&node.revoke_service());
            let to_node = Loopback::new(revokes as Arc<dyn Service>)
                .with_link(link.clone())
                .with_latency(rpc);
            manager.register_node(id, Arc::new(to_node));
            nodes.push(node);
            links.push(link);
            recorders.push(recorder);
        }
        Ok(Cluster {
            storage,
            manager,
            nodes,
            links,
            recorders,
            probes,
        })
    }

    /// Node `id`, counting from 1.
    pub fn node(&self, id: usize) -> &Arc<ClientNode> {
        &self.nodes[id - 1]
    }

    pub fn nodes(&self) -> &[Arc<ClientNode>] {
        &self.nodes
    }

    pub fn manager(&self) -> &Arc<Manager> {
        &self.manager
    }

    pub fn storage_node(&self, id: u16) -> &Arc<StorageNode> {
        &self.storage[id as usize]
    }

    pub fn probes(&self) -> &Arc<Probes> {
        &self.probes
    }

    /// Messages node `id` sent to the manager (needs
    /// `record_manager_traffic`).
    pub fn manager_traffic(&self, id: usize) -> &Arc<Recorder> {
        &self.recorders[id - 1]
    }

    /// A storage client with no simulated cost, for checking what storage
    /// really holds.
    pub fn storage_client(&self) -> StorageClient {
        StorageClient::new(
            self.storage
                .iter()
                .map(|s| Arc::new(Loopback::new(s.clone())) as Arc<dyn Endpoint>)
                .collect(),
        )
    }

    /// Cuts (or restores) the link between node `id` and the manager.
    pub fn set_partitioned(&self, id: usize, partitioned: bool) {
        self.links[id - 1].set_up(!partitioned);
    }

    /// Grant log text.
    pub fn dump(&self) -> String {
        self.manager.dump()
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for n in &self.nodes {
            n.shutdown();
        }
    }
}
