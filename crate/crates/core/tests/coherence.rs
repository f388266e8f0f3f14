//! Multi-node behaviour seen through the client facade.

use std::collections::HashMap;
use std::time::Duration;

use leasefs::cluster::{Cluster, ClusterConfig};
use leasefs::manager::ManagerConfig;
use leasefs::types::{CacheMode, PageData, PAGE_SIZE};
use leasefs::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cluster(mode: CacheMode, nodes: usize) -> Cluster {
    let mut cfg = ClusterConfig::new(mode, nodes);
    cfg.manager = ManagerConfig {
        retry_limit: 2,
        backoff: Duration::from_millis(5),
    };
    Cluster::new(cfg).unwrap()
}

/// Sequential random page writes and reads from random nodes must always
/// observe the last write, whichever node made it.
#[test]
fn every_read_sees_the_last_write() {
    for mode in [CacheMode::WriteBackLease, CacheMode::WriteThroughOcc] {
        let c = cluster(mode, 3);
        let fds: Vec<_> = c.nodes().iter().map(|n| n.open("f", true).unwrap()).collect();
        let gfi = c.node(1).gfi(fds[0]).unwrap();
        let mut model: HashMap<u64, PageData> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for step in 0..400u64 {
            let n = rng.gen_range(0..3);
            let page = rng.gen_range(0..6u64);
            if rng.gen_bool(0.5) {
                let data = PageData::patterned(step);
                c.nodes()[n].write_page(gfi, page, &data).unwrap();
                model.insert(page, data);
            } else {
                let got = c.nodes()[n].read_page(gfi, page).unwrap();
                let want = model.get(&page).cloned().unwrap_or_else(PageData::zeroed);
                assert_eq!(got, want, "{mode} step {step} node {n} page {page}");
            }
        }
    }
}

/// Without coordination a second node keeps serving its stale copy.
#[test]
fn unsafe_mode_serves_stale_pages() {
    let c = cluster(CacheMode::WriteBackUnsafe, 2);
    let fa = c.node(1).open("f", true).unwrap();
    let gfi = c.node(1).gfi(fa).unwrap();
    c.node(1).write_page(gfi, 0, &PageData::patterned(1)).unwrap();
    c.node(1).fsync(fa).unwrap();
    assert_eq!(c.node(2).read_page(gfi, 0).unwrap(), PageData::patterned(1));
    c.node(1).write_page(gfi, 0, &PageData::patterned(2)).unwrap();
    c.node(1).fsync(fa).unwrap();
    assert_eq!(c.node(2).read_page(gfi, 0).unwrap(), PageData::patterned(1));
    assert_eq!(c.dump(), "");
}

#[test]
fn byte_ranges_across_nodes() {
    let c = cluster(CacheMode::WriteBackLease, 2);
    let fa = c.node(1).open("log", true).unwrap();
    let fb = c.node(2).open("log", false).unwrap();
    let mut model = vec![0u8; 3 * PAGE_SIZE];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..60 {
        let off = rng.gen_range(0..2 * PAGE_SIZE);
        let len = rng.gen_range(1..PAGE_SIZE);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let (n, fd) = if i % 2 == 0 { (c.node(1), fa) } else { (c.node(2), fb) };
        n.write(fd, off as u64, &bytes).unwrap();
        model[off..off + len].copy_from_slice(&bytes);
    }
    let end = model.iter().rposition(|&b| b != 0).map_or(0, |p| p + 1);
    let got = c.node(1).read(fa, 0, 3 * PAGE_SIZE).unwrap();
    assert!(got.len() >= end);
    assert_eq!(&got[..end], &model[..end]);
}

/// Readers share; a writer revokes every reader; readers then refetch.
#[test]
fn read_sharing_then_write_revokes_all() {
    let c = cluster(CacheMode::WriteBackLease, 4);
    let gfi = c.node(1).gfi(c.node(1).open("shared", true).unwrap()).unwrap();
    for n in c.nodes() {
        n.read_page(gfi, 0).unwrap();
    }
    let (ty, owners) = c.manager().lease_state(gfi);
    assert_eq!((ty.name(), owners.len()), ("read", 4));
    c.node(4).write_page(gfi, 0, &PageData::patterned(4)).unwrap();
    let (ty, owners) = c.manager().lease_state(gfi);
    assert_eq!(ty.name(), "write");
    assert_eq!(owners.len(), 1);
    for n in c.nodes().iter().take(3) {
        assert_eq!(n.read_page(gfi, 0).unwrap(), PageData::patterned(4));
    }
}

/// A partitioned owner cannot be revoked, so the contender gets a lease
/// error instead of stale data; healing the link lets it through.
#[test]
fn partitioned_owner_blocks_contender() {
    let c = cluster(CacheMode::WriteBackLease, 2);
    let gfi = c.node(1).gfi(c.node(1).open("p", true).unwrap()).unwrap();
    c.node(1).write_page(gfi, 0, &PageData::patterned(11)).unwrap();
    c.set_partitioned(1, true);
    let err = c.node(2).read_page(gfi, 0).unwrap_err();
    assert!(matches!(err, Error::LeaseUnavailable(_)), "{err}");
    c.set_partitioned(1, false);
    assert_eq!(c.node(2).read_page(gfi, 0).unwrap(), PageData::patterned(11));
}

#[test]
fn flusher_hands_dirty_pages_to_the_daemon() {
    let mut cfg = ClusterConfig::new(CacheMode::WriteBackLease, 1);
    cfg.client.flush_interval = Duration::from_millis(50);
    let c = Cluster::new(cfg).unwrap();
    let gfi = c.node(1).gfi(c.node(1).open("bg", true).unwrap()).unwrap();
    c.node(1).write_page(gfi, 2, &PageData::patterned(5)).unwrap();
    let kernel_dirty = || c.node(1).kcache().cached_pages(gfi).contains(&(2, true));
    assert!(kernel_dirty());
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while kernel_dirty() {
        assert!(std::time::Instant::now() < deadline, "kernel page stayed dirty");
        std::thread::sleep(Duration::from_millis(20));
    }
    assert_eq!(c.node(1).daemon().with_buffer(|b| b.is_dirty(gfi, 2)), Some(true));
    // storage sees it only once the daemon flushes
    let st = c.storage_client();
    assert!(st.read_pages(gfi, &[2]).unwrap()[0].is_zero());
    c.node(1).fsync_gfi(gfi).unwrap();
    assert_eq!(st.read_pages(gfi, &[2]).unwrap()[0], PageData::patterned(5));
}

#[test]
fn files_route_across_storage_nodes() {
    let mut cfg = ClusterConfig::new(CacheMode::WriteBackLease, 2);
    cfg.storage_nodes = 3;
    let c = Cluster::new(cfg).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..30 {
        let fd = c.node(1).open(&format!("f{i}"), true).unwrap();
        let gfi = c.node(1).gfi(fd).unwrap();
        seen.insert(gfi.storage_node);
        c.node(1).write_page(gfi, 0, &PageData::patterned(i)).unwrap();
        assert_eq!(c.node(2).read_page(gfi, 0).unwrap(), PageData::patterned(i));
    }
    assert!(seen.len() > 1, "{seen:?}");
}
