//! The daemon's fixed-capacity page buffer.

use std::collections::{BTreeMap, HashMap};

use crate::error::Result;
use crate::storage::StorageClient;
use crate::types::{Gfi, PageData, PAGE_SIZE};

pub type Key = (Gfi, u64);

/// Destination for pages written back on eviction.
pub trait PageSink {
    fn write_pages(&self, gfi: Gfi, pages: &[(u64, PageData)]) -> Result<()>;
}

impl PageSink for StorageClient {
    fn write_pages(&self, gfi: Gfi, pages: &[(u64, PageData)]) -> Result<()> {
        StorageClient::write_pages(self, gfi, pages)
    }
}

/// Chooses which resident page leaves next.
pub trait EvictionPolicy: Send {
    /// `key` was inserted or accessed.
    fn touch(&mut self, key: Key);
    fn remove(&mut self, key: Key);
    /// Next page to evict, without removing it.
    fn victim(&self) -> Option<Key>;
}

/// Least recently used first.
#[derive(Default)]
pub struct Lru {
    tick: u64,
    stamp: HashMap<Key, u64>,
    order: BTreeMap<u64, Key>,
}

impl EvictionPolicy for Lru {
    fn touch(&mut self, key: Key) {
        self.tick += 1;
        if let Some(old) = self.stamp.insert(key, self.tick) {
            self.order.remove(&old);
        }
        self.order.insert(self.tick, key);
    }

    fn remove(&mut self, key: Key) {
        if let Some(old) = self.stamp.remove(&key) {
            self.order.remove(&old);
        }
    }

    fn victim(&self) -> Option<Key> {
        self.order.values().next().copied()
    }
}

struct Entry {
    data: PageData,
    dirty: bool,
}

pub struct BufferCache {
    capacity_pages: usize,
    entries: BTreeMap<Key, Entry>,
    policy: Box<dyn EvictionPolicy>,
    evictions: u64,
    dirty_evictions: u64,
}

impl BufferCache {
    /// LRU cache holding at most `capacity_bytes` of page data (at least one
    /// page).
    pub fn new(capacity_bytes: usize) -> Self {
        Self::with_policy(capacity_bytes, Box::<Lru>::default())
    }

    pub fn with_policy(capacity_bytes: usize, policy: Box<dyn EvictionPolicy>) -> Self {
        BufferCache {
            capacity_pages: (capacity_bytes / PAGE_SIZE).max(1),
            entries: BTreeMap::new(),
            policy,
            evictions: 0,
            dirty_evictions: 0,
        }
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_pages * PAGE_SIZE
    }

    pub fn resident_bytes(&self) -> usize {
        self.entries.len() * PAGE_SIZE
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(total, dirty)` evictions so far.
    pub fn evictions(&self) -> (u64, u64) {
        (self.evictions, self.dirty_evictions)
    }

    pub fn contains(&self, gfi: Gfi, index: u64) -> bool {
        self.entries.contains_key(&(gfi, index))
    }

    pub fn is_dirty(&self, gfi: Gfi, index: u64) -> Option<bool> {
        self.entries.get(&(gfi, index)).map(|e| e.dirty)
    }

    pub fn get(&mut self, gfi: Gfi, index: u64) -> Option<PageData> {
        let e = self.entries.get(&(gfi, index))?;
        self.policy.touch((gfi, index));
        Some(e.data.clone())
    }

    /// Inserts or overwrites a page, evicting past capacity. A dirty victim
    /// is written to `sink` first; if that fails the victim stays and the
    /// insertion is rejected.
    pub fn put(&mut self, gfi: Gfi, index: u64, data: PageData, dirty: bool, sink: &dyn PageSink) -> Result<()> {
        let key = (gfi, index);
        if let Some(e) = self.entries.get_mut(&key) {
            e.data = data;
            e.dirty |= dirty;
            self.policy.touch(key);
            return Ok(());
        }
        while self.entries.len() >= self.capacity_pages {
            let victim = match self.policy.victim() {
                Some(v) => v,
                None => break,
            };
            if let Some(e) = self.entries.get(&victim) {
                if e.dirty {
                    sink.write_pages(victim.0, &[(victim.1, e.data.clone())])?;
                    self.dirty_evictions += 1;
                }
            }
            self.entries.remove(&victim);
            self.policy.remove(victim);
            self.evictions += 1;
        }
        self.entries.insert(key, Entry { data, dirty });
        self.policy.touch(key);
        Ok(())
    }

    /// Inserts a clean page unless one is already resident.
    pub fn put_if_absent(&mut self, gfi: Gfi, index: u64, data: PageData, sink: &dyn PageSink) -> Result<()> {
        if self.contains(gfi, index) {
            return Ok(());
        }
        self.put(gfi, index, data, false, sink)
    }

    pub fn dirty_pages(&self, gfi: Gfi) -> Vec<(u64, PageData)> {
        self.range(gfi)
            .filter(|(_, e)| e.dirty)
            .map(|(k, e)| (k.1, e.data.clone()))
            .collect()
    }

    /// Clears the dirty bit of each listed page whose content still equals
    /// the listed bytes (a newer write keeps its bit).
    pub fn mark_clean(&mut self, gfi: Gfi, pages: &[(u64, PageData)]) {
        for (i, data) in pages {
            if let Some(e) = self.entries.get_mut(&(gfi, *i)) {
                if e.data == *data {
                    e.dirty = false;
                }
            }
        }
    }

    /// Removes every page of `gfi`, returning the dirty ones.
    pub fn drop_file(&mut self, gfi: Gfi) -> Vec<(u64, PageData)> {
        let keys: Vec<Key> = self.range(gfi).map(|(k, _)| *k).collect();
        let mut dirty = Vec::new();
        for k in keys {
            let e = self.entries.remove(&k).expect("key listed from the map");
            self.policy.remove(k);
            if e.dirty {
                dirty.push((k.1, e.data));
            }
        }
        dirty
    }

    fn range(&self, gfi: Gfi) -> impl Iterator<Item = (&Key, &Entry)> {
        self.entries.range((gfi, 0)..=(gfi, u64::MAX))
    }
}

/// Merges two page lists by index; entries of `newer` win.
pub fn union_pages(newer: Vec<(u64, PageData)>, older: Vec<(u64, PageData)>) -> Vec<(u64, PageData)> {
    let mut m: BTreeMap<u64, PageData> = older.into_iter().collect();
    m.extend(newer);
    m.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use parking_lot::Mutex;
    use proptest::prelude::*;

    #[derive(Default)]
    struct CountingSink {
        batches: Mutex<Vec<(Gfi, Vec<u64>)>>,
        fail: std::sync::atomic::AtomicBool,
    }

    impl PageSink for CountingSink {
        fn write_pages(&self, gfi: Gfi, pages: &[(u64, PageData)]) -> Result<()> {
            if self.fail.load(std::sync::atomic::Ordering::SeqCst) {
                return Err(Error::Storage("rejected".into()));
            }
            self.batches.lock().push((gfi, pages.iter().map(|p| p.0).collect()));
            Ok(())
        }
    }

    const G: Gfi = Gfi::new(0, 1);

    fn p(label: u64) -> PageData {
        PageData::patterned(label)
    }

    #[test]
    fn put_then_get_hits() {
        let sink = CountingSink::default();
        let mut bc = BufferCache::new(4 * PAGE_SIZE);
        bc.put(G, 0, p(1), false, &sink).unwrap();
        assert_eq!(bc.get(G, 0), Some(p(1)));
        assert_eq!(bc.get(G, 1), None);
    }

    #[test]
    fn clean_eviction_makes_no_storage_traffic() {
        let sink = CountingSink::default();
        let mut bc = BufferCache::new(2 * PAGE_SIZE);
        bc.put(G, 0, p(0), false, &sink).unwrap();
        bc.put(G, 1, p(1), false, &sink).unwrap();
        bc.put(G, 2, p(2), false, &sink).unwrap();
        assert!(!bc.contains(G, 0));
        assert!(sink.batches.lock().is_empty());
        assert_eq!(bc.evictions(), (1, 0));
    }

    #[test]
    fn dirty_eviction_writes_exactly_the_victim() {
        let sink = CountingSink::default();
        let mut bc = BufferCache::new(2 * PAGE_SIZE);
        bc.put(G, 0, p(0), true, &sink).unwrap();
        bc.put(G, 1, p(1), true, &sink).unwrap();
        bc.put(G, 2, p(2), false, &sink).unwrap();
        assert_eq!(*sink.batches.lock(), vec![(G, vec![0])]);
    }

    #[test]
    fn get_promotes() {
        let sink = CountingSink::default();
        let mut bc = BufferCache::new(2 * PAGE_SIZE);
        bc.put(G, 0, p(0), false, &sink).unwrap();
        bc.put(G, 1, p(1), false, &sink).unwrap();
        bc.get(G, 0);
        bc.put(G, 2, p(2), false, &sink).unwrap();
        assert!(bc.contains(G, 0) && !bc.contains(G, 1));
    }

    #[test]
    fn failed_dirty_eviction_rejects_the_insert() {
        let sink = CountingSink::default();
        let mut bc = BufferCache::new(PAGE_SIZE);
        bc.put(G, 0, p(0), true, &sink).unwrap();
        sink.fail.store(true, std::sync::atomic::Ordering::SeqCst);
        assert!(bc.put(G, 1, p(1), false, &sink).is_err());
        assert_eq!(bc.is_dirty(G, 0), Some(true));
        assert!(!bc.contains(G, 1));
    }

    #[test]
    fn mark_clean_spares_newer_writes() {
        let sink = CountingSink::default();
        let mut bc = BufferCache::new(8 * PAGE_SIZE);
        bc.put(G, 0, p(0), true, &sink).unwrap();
        bc.put(G, 1, p(1), true, &sink).unwrap();
        let snapshot = bc.dirty_pages(G);
        bc.put(G, 1, p(11), true, &sink).unwrap();
        bc.mark_clean(G, &snapshot);
        assert_eq!(bc.is_dirty(G, 0), Some(false));
        assert_eq!(bc.is_dirty(G, 1), Some(true));
    }

    #[test]
    fn drop_file_only_touches_that_file() {
        let sink = CountingSink::default();
        let other = Gfi::new(0, 2);
        let mut bc = BufferCache::new(8 * PAGE_SIZE);
        bc.put(G, 0, p(0), true, &sink).unwrap();
        bc.put(G, 1, p(1), false, &sink).unwrap();
        bc.put(other, 0, p(2), true, &sink).unwrap();
        assert_eq!(bc.drop_file(G), vec![(0, p(0))]);
        assert_eq!(bc.len(), 1);
        assert!(bc.contains(other, 0));
    }

    #[test]
    fn union_prefers_newer() {
        let u = union_pages(vec![(1, p(10))], vec![(0, p(0)), (1, p(1))]);
        assert_eq!(u, vec![(0, p(0)), (1, p(10))]);
    }

    proptest! {
        /// Against a model with unbounded memory: capacity is respected
        /// after every put, and every page's latest write is either resident
        /// or was written to the sink.
        #[test]
        fn never_over_capacity_and_never_loses_dirty_data(
            cap in 1usize..5,
            ops in proptest::collection::vec((0u64..8, any::<bool>(), 0u64..1000), 1..60),
        ) {
            #[derive(Default)]
            struct Store(Mutex<HashMap<u64, PageData>>);
            impl PageSink for Store {
                fn write_pages(&self, _: Gfi, pages: &[(u64, PageData)]) -> Result<()> {
                    let mut s = self.0.lock();
                    for (i, d) in pages {
                        s.insert(*i, d.clone());
                    }
                    Ok(())
                }
            }
            let store = Store::default();
            let mut bc = BufferCache::new(cap * PAGE_SIZE);
            let mut latest: HashMap<u64, PageData> = HashMap::new();
            for (idx, dirty, label) in ops {
                let data = p(label);
                if dirty || !latest.contains_key(&idx) {
                    if !dirty {
                        // clean puts model fills: they carry storage content
                        store.write_pages(G, &[(idx, data.clone())]).unwrap();
                    }
                    bc.put(G, idx, data.clone(), dirty, &store).unwrap();
                    latest.insert(idx, data);
                }
                prop_assert!(bc.resident_bytes() <= bc.capacity_bytes());
            }
            for (idx, want) in latest {
                let have = bc.get(G, idx).or_else(|| store.0.lock().get(&idx).cloned());
                prop_assert_eq!(have, Some(want));
            }
        }
    }
}
