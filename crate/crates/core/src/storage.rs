//! The storage service: a namespace mapping paths to [`Gfi`]s and a page
//! store per file, optionally backed by a directory so contents survive a
//! process restart.
//!
//! On-disk layout of one storage node directory:
//!
//! ```text
//! namespace.journal   one line per create: path \t storage_node_id \t inode
//! <inode>.dat         page i at byte offset i * PAGE_SIZE
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::transport::{Endpoint, Service};
use crate::types::{Gfi, PageData, PAGE_SIZE};
use crate::wire::WireMessage;

pub const JOURNAL_FILE: &str = "namespace.journal";

/// Storage node responsible for `path` in a cluster of `nodes` nodes.
pub fn route_path(path: &str, nodes: usize) -> u16 {
    (crate::types::digest_bytes(path.as_bytes()) % nodes.max(1) as u64) as u16
}

enum Backing {
    Memory(BTreeMap<u64, PageData>),
    Disk(File),
}

struct FileData {
    length: u64,
    backing: Backing,
}

#[derive(Debug, Default)]
pub struct StorageStats {
    pub read_rpcs: AtomicU64,
    pub write_rpcs: AtomicU64,
    pub pages_written: AtomicU64,
}

struct Namespace {
    paths: HashMap<String, u64>,
    next_inode: u64,
    journal: Option<File>,
}

/// One storage node.
pub struct StorageNode {
    id: u16,
    dir: Option<PathBuf>,
    ns: Mutex<Namespace>,
    files: RwLock<HashMap<u64, Arc<RwLock<FileData>>>>,
    fail_writes: AtomicU32,
    stats: StorageStats,
}

impl StorageNode {
    /// A node that keeps everything in memory.
    pub fn in_memory(id: u16) -> Arc<Self> {
        Arc::new(StorageNode {
            id,
            dir: None,
            ns: Mutex::new(Namespace {
                paths: HashMap::new(),
                next_inode: 1,
                journal: None,
            }),
            files: RwLock::new(HashMap::new()),
            fail_writes: AtomicU32::new(0),
            stats: StorageStats::default(),
        })
    }

    /// Opens (or initializes) a directory-backed node, replaying its journal.
    pub fn open_dir(id: u16, dir: impl AsRef<Path>) -> Result<Arc<Self>> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let journal_path = dir.join(JOURNAL_FILE);
        let mut paths = HashMap::new();
        let mut next_inode = 1;
        if journal_path.exists() {
            for line in BufReader::new(File::open(&journal_path)?).lines() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let (path, node, inode) = parse_journal_line(&line)
                    .ok_or_else(|| Error::Storage(format!("bad journal line {line:?}")))?;
                if node != id {
                    return Err(Error::Storage(format!(
                        "journal entry for node {node} in directory of node {id}"
                    )));
                }
                next_inode = next_inode.max(inode + 1);
                paths.insert(path, inode);
            }
        }
        let mut files = HashMap::new();
        for &inode in paths.values() {
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(dir.join(format!("{inode}.dat")))?;
            let length = f.metadata()?.len();
            files.insert(
                inode,
                Arc::new(RwLock::new(FileData {
                    length,
                    backing: Backing::Disk(f),
                })),
            );
        }
        let journal = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        Ok(Arc::new(StorageNode {
            id,
            dir: Some(dir),
            ns: Mutex::new(Namespace {
                paths,
                next_inode,
                journal: Some(journal),
            }),
            files: RwLock::new(files),
            fail_writes: AtomicU32::new(0),
            stats: StorageStats::default(),
        }))
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn stats(&self) -> &StorageStats {
        &self.stats
    }

    /// Makes the next `n` page writes fail.
    pub fn fail_next_writes(&self, n: u32) {
        self.fail_writes.store(n, Ordering::SeqCst);
    }

    pub fn create(&self, path: &str) -> Result<Gfi> {
        let mut ns = self.ns.lock();
        if ns.paths.contains_key(path) {
            return Err(Error::AlreadyExists(path.into()));
        }
        if path.contains(['\t', '\n']) {
            return Err(Error::Protocol(format!("unsupported path {path:?}")));
        }
        let inode = ns.next_inode;
        let backing = match &self.dir {
            Some(dir) => Backing::Disk(
                OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create(true)
                    .truncate(true)
                    .open(dir.join(format!("{inode}.dat")))?,
            ),
            None => Backing::Memory(BTreeMap::new()),
        };
        if let Some(j) = ns.journal.as_mut() {
            writeln!(j, "{path}\t{}\t{inode}", self.id)?;
            j.sync_data()?;
        }
        ns.next_inode += 1;
        ns.paths.insert(path.into(), inode);
        self.files
            .write()
            .insert(inode, Arc::new(RwLock::new(FileData { length: 0, backing })));
        Ok(Gfi::new(self.id, inode))
    }

    pub fn resolve(&self, path: &str) -> Result<(Gfi, u64)> {
        let inode = *self
            .ns
            .lock()
            .paths
            .get(path)
            .ok_or_else(|| Error::NotFound(path.into()))?;
        let len = self.file(Gfi::new(self.id, inode))?.read().length;
        Ok((Gfi::new(self.id, inode), len))
    }

    fn file(&self, gfi: Gfi) -> Result<Arc<RwLock<FileData>>> {
        if gfi.storage_node != self.id {
            return Err(Error::UnknownGfi(gfi));
        }
        self.files
            .read()
            .get(&gfi.inode)
            .cloned()
            .ok_or(Error::UnknownGfi(gfi))
    }

    pub fn read_pages(&self, gfi: Gfi, indices: &[u64]) -> Result<Vec<PageData>> {
        let file = self.file(gfi)?;
        self.stats.read_rpcs.fetch_add(1, Ordering::Relaxed);
        let data = file.read();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let page = match &data.backing {
                Backing::Memory(m) => m.get(&i).cloned().unwrap_or_else(PageData::zeroed),
                Backing::Disk(f) => {
                    let mut page = PageData::zeroed();
                    let off = i * PAGE_SIZE as u64;
                    if off < data.length {
                        read_full_at(f, page.as_mut_slice(), off)?;
                    }
                    page
                }
            };
            out.push(page);
        }
        Ok(out)
    }

    /// Applies a batch atomically with respect to readers of the same file.
    pub fn write_pages(&self, gfi: Gfi, pages: &[(u64, PageData)]) -> Result<()> {
        let file = self.file(gfi)?;
        self.stats.write_rpcs.fetch_add(1, Ordering::Relaxed);
        if pages.is_empty() {
            return Ok(());
        }
        if self
            .fail_writes
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(Error::Storage("injected write failure".into()));
        }
        let mut data = file.write();
        let mut end = data.length;
        for (i, page) in pages {
            match &mut data.backing {
                Backing::Memory(m) => {
                    m.insert(*i, page.clone());
                }
                Backing::Disk(f) => f.write_all_at(page.as_slice(), i * PAGE_SIZE as u64)?,
            }
            end = end.max((i + 1) * PAGE_SIZE as u64);
        }
        if let Backing::Disk(f) = &data.backing {
            f.sync_data()?;
        }
        data.length = end;
        self.stats
            .pages_written
            .fetch_add(pages.len() as u64, Ordering::Relaxed);
        Ok(())
    }
}

fn read_full_at(f: &File, buf: &mut [u8], off: u64) -> std::io::Result<()> {
    let mut done = 0;
    while done < buf.len() {
        match f.read_at(&mut buf[done..], off + done as u64)? {
            0 => break,
            n => done += n,
        }
    }
    Ok(())
}

/// Parses one `path \t node \t inode` journal line.
pub fn parse_journal_line(line: &str) -> Option<(String, u16, u64)> {
    let mut parts = line.split('\t');
    let path = parts.next()?;
    let node = parts.next()?.parse().ok()?;
    let inode = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((path.to_string(), node, inode))
}

impl Service for StorageNode {
    fn handle(&self, msg: WireMessage) -> WireMessage {
        let req = msg.req();
        let result = match msg {
            WireMessage::Resolve { path, .. } => self
                .resolve(&path)
                .map(|(gfi, length)| WireMessage::ResolveReply { req, gfi, length }),
            WireMessage::Create { path, .. } => self
                .create(&path)
                .map(|gfi| WireMessage::CreateReply { req, gfi }),
            WireMessage::ReadPages { gfi, indices, .. } => {
                self.read_pages(gfi, &indices).map(|pages| WireMessage::ReadPagesReply {
                    req,
                    pages: pages.into_iter().map(|p| p.as_slice().to_vec()).collect(),
                })
            }
            WireMessage::WritePages { gfi, pages, .. } => {
                let mut batch = Vec::with_capacity(pages.len());
                let mut bad = None;
                for (i, bytes) in pages {
                    match PageData::from_slice(&bytes) {
                        Some(p) => batch.push((i, p)),
                        None => {
                            bad = Some(bytes.len());
                            break;
                        }
                    }
                }
                match bad {
                    Some(n) => Err(Error::BadBlockSize(n)),
                    None => self
                        .write_pages(gfi, &batch)
                        .map(|()| WireMessage::WritePagesReply { req }),
                }
            }
            other => Err(Error::Protocol(format!("storage cannot serve tag {}", other.tag()))),
        };
        result.unwrap_or_else(|e| WireMessage::error(req, e.code(), e.to_string()))
    }
}

/// Client of a storage cluster; routes by path hash on create/resolve and by
/// `Gfi::storage_node` otherwise.
pub struct StorageClient {
    nodes: Vec<Arc<dyn Endpoint>>,
    next_req: AtomicU64,
}

impl StorageClient {
    pub fn new(nodes: Vec<Arc<dyn Endpoint>>) -> Self {
        assert!(!nodes.is_empty(), "storage cluster needs at least one node");
        StorageClient {
            nodes,
            next_req: AtomicU64::new(1),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn call(&self, node: u16, gfi: Option<Gfi>, build: impl FnOnce(u64) -> WireMessage) -> Result<WireMessage> {
        let ep = self
            .nodes
            .get(node as usize)
            .ok_or_else(|| Error::Storage(format!("no storage node {node}")))?;
        let req = self.next_req.fetch_add(1, Ordering::Relaxed);
        match ep.call(build(req))? {
            WireMessage::Error { code, message, .. } => Err(Error::from_remote(code, message, gfi)),
            reply if reply.req() != req => Err(Error::Protocol("reply for another request".into())),
            reply => Ok(reply),
        }
    }

    pub fn create(&self, path: &str) -> Result<Gfi> {
        let node = route_path(path, self.nodes.len());
        match self.call(node, None, |req| WireMessage::Create { req, path: path.into() })? {
            WireMessage::CreateReply { gfi, .. } => Ok(gfi),
            other => Err(unexpected(&other)),
        }
    }

    pub fn resolve(&self, path: &str) -> Result<(Gfi, u64)> {
        let node = route_path(path, self.nodes.len());
        match self.call(node, None, |req| WireMessage::Resolve { req, path: path.into() })? {
            WireMessage::ResolveReply { gfi, length, .. } => Ok((gfi, length)),
            other => Err(unexpected(&other)),
        }
    }

    pub fn read_pages(&self, gfi: Gfi, indices: &[u64]) -> Result<Vec<PageData>> {
        let reply = self.call(gfi.storage_node, Some(gfi), |req| WireMessage::ReadPages {
            req,
            gfi,
            indices: indices.to_vec(),
        })?;
        match reply {
            WireMessage::ReadPagesReply { pages, .. } if pages.len() == indices.len() => pages
                .iter()
                .map(|b| PageData::from_slice(b).ok_or(Error::BadBlockSize(b.len())))
                .collect(),
            other => Err(unexpected(&other)),
        }
    }

    /// One WritePages RPC for the whole batch; empty batches send nothing.
    pub fn write_pages(&self, gfi: Gfi, pages: &[(u64, PageData)]) -> Result<()> {
        if pages.is_empty() {
            return Ok(());
        }
        let reply = self.call(gfi.storage_node, Some(gfi), |req| WireMessage::WritePages {
            req,
            gfi,
            pages: pages.iter().map(|(i, p)| (*i, p.as_slice().to_vec())).collect(),
        })?;
        match reply {
            WireMessage::WritePagesReply { .. } => Ok(()),
            other => Err(unexpected(&other)),
        }
    }
}

fn unexpected(msg: &WireMessage) -> Error {
    Error::Protocol(format!("unexpected reply tag {}", msg.tag()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Loopback, Recorder};
    use crate::wire::ErrorCode;

    fn page(label: u64) -> PageData {
        PageData::patterned(label)
    }

    #[test]
    fn create_allocates_from_the_counter() {
        let s = StorageNode::in_memory(0);
        assert_eq!(s.create("/a").unwrap(), Gfi::new(0, 1));
        assert!(matches!(s.create("/a"), Err(Error::AlreadyExists(_))));
        assert_eq!(s.create("/b").unwrap(), Gfi::new(0, 2));
    }

    #[test]
    fn resolve_contract() {
        let s = StorageNode::in_memory(2);
        let g = s.create("/x").unwrap();
        assert_eq!(s.resolve("/x").unwrap(), (g, 0));
        assert_eq!(s.resolve("/x").unwrap().0, g);
        assert!(matches!(s.resolve("/nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn holes_read_as_zero() {
        let s = StorageNode::in_memory(0);
        let g = s.create("/f").unwrap();
        s.write_pages(g, &[(0, page(10)), (2, page(12))]).unwrap();
        let got = s.read_pages(g, &[0, 1, 2]).unwrap();
        assert_eq!(got, vec![page(10), PageData::zeroed(), page(12)]);
        assert!(s.read_pages(g, &[]).unwrap().is_empty());
        assert!(matches!(s.read_pages(Gfi::new(0, 99), &[0]), Err(Error::UnknownGfi(_))));
    }

    #[test]
    fn length_is_max_written_extent() {
        let s = StorageNode::in_memory(0);
        let g = s.create("/f").unwrap();
        s.write_pages(g, &[(0, page(1)), (3, page(4))]).unwrap();
        let got = s.read_pages(g, &[0, 1, 2, 3]).unwrap();
        assert_eq!(got[3], page(4));
        assert!(got[1].is_zero() && got[2].is_zero());
        assert_eq!(s.resolve("/f").unwrap().1, 4 * PAGE_SIZE as u64);
        s.write_pages(g, &[]).unwrap();
        assert_eq!(s.resolve("/f").unwrap().1, 4 * PAGE_SIZE as u64);
    }

    #[test]
    fn wrong_block_size_is_rejected_over_the_wire() {
        let s = StorageNode::in_memory(0);
        let g = s.create("/f").unwrap();
        let reply = s.handle(WireMessage::WritePages {
            req: 5,
            gfi: g,
            pages: vec![(0, vec![1, 2, 3])],
        });
        assert!(matches!(
            reply,
            WireMessage::Error {
                code: ErrorCode::BadBlockSize,
                ..
            }
        ));
        assert_eq!(s.resolve("/f").unwrap().1, 0);
    }

    #[test]
    fn batch_is_atomic_for_readers() {
        let s = StorageNode::in_memory(0);
        let g = s.create("/f").unwrap();
        let idx: Vec<u64> = (0..8).collect();
        std::thread::scope(|sc| {
            sc.spawn(|| {
                for round in 1..200u64 {
                    let batch: Vec<_> = idx.iter().map(|&i| (i, page(round))).collect();
                    s.write_pages(g, &batch).unwrap();
                }
            });
            sc.spawn(|| {
                for _ in 0..200 {
                    let got = s.read_pages(g, &idx).unwrap();
                    assert!(got.windows(2).all(|w| w[0] == w[1]), "torn batch");
                }
            });
        });
    }

    #[test]
    fn directory_backed_node_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let g = {
            let s = StorageNode::open_dir(1, dir.path()).unwrap();
            let g = s.create("/keep").unwrap();
            s.write_pages(g, &[(1, page(77))]).unwrap();
            g
        };
        let s = StorageNode::open_dir(1, dir.path()).unwrap();
        assert_eq!(s.resolve("/keep").unwrap(), (g, 2 * PAGE_SIZE as u64));
        assert_eq!(s.read_pages(g, &[0, 1, 5]).unwrap(), vec![PageData::zeroed(), page(77), PageData::zeroed()]);
        assert_eq!(s.create("/next").unwrap(), Gfi::new(1, 2));
        let journal = fs::read_to_string(dir.path().join(JOURNAL_FILE)).unwrap();
        assert_eq!(journal.lines().next(), Some("/keep\t1\t1"));
    }

    #[test]
    fn client_routes_by_gfi() {
        let nodes: Vec<Arc<StorageNode>> = (0..3).map(StorageNode::in_memory).collect();
        let rec = Recorder::new();
        let eps: Vec<Arc<dyn Endpoint>> = nodes
            .iter()
            .map(|n| Arc::new(Loopback::new(n.clone()).with_recorder(rec.clone())) as Arc<dyn Endpoint>)
            .collect();
        let c = StorageClient::new(eps);
        for i in 0..12 {
            let path = format!("/f{i}");
            let g = c.create(&path).unwrap();
            assert_eq!(g.storage_node, route_path(&path, 3));
            assert_eq!(c.resolve(&path).unwrap().0, g);
            c.write_pages(g, &[(0, page(i))]).unwrap();
            assert_eq!(c.read_pages(g, &[0]).unwrap(), vec![page(i)]);
        }
        rec.clear();
        c.write_pages(Gfi::new(0, 1), &[]).unwrap();
        assert!(rec.tags().is_empty());
    }

    #[test]
    fn injected_failure_leaves_file_unchanged() {
        let s = StorageNode::in_memory(0);
        let g = s.create("/f").unwrap();
        s.fail_next_writes(1);
        assert!(s.write_pages(g, &[(0, page(1))]).is_err());
        assert!(s.read_pages(g, &[0]).unwrap()[0].is_zero());
        s.write_pages(g, &[(0, page(1))]).unwrap();
    }
}
