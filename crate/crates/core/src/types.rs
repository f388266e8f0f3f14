//! Identifiers and small value types shared by every layer of the stack.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Page granularity of both cache tiers and of the storage service.
pub const PAGE_SIZE: usize = 4096;

/// Cluster-wide file identity: the storage node that owns the file plus the
/// inode number local to that storage node.
///
/// The derived ordering (storage node first, then inode) is the canonical
/// order for any code path that must hold locks on two files at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Gfi {
    pub storage_node: u16,
    pub inode: u64,
}

impl Gfi {
    pub const fn new(storage_node: u16, inode: u64) -> Self {
        Self {
            storage_node,
            inode,
        }
    }
}

impl fmt::Display for Gfi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.storage_node, self.inode)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid value {0:?}")]
pub struct ParseError(pub String);

impl FromStr for Gfi {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, inode) = s.split_once(':').ok_or_else(|| ParseError(s.into()))?;
        Ok(Gfi {
            storage_node: node.parse().map_err(|_| ParseError(s.into()))?,
            inode: inode.parse().map_err(|_| ParseError(s.into()))?,
        })
    }
}

/// A DFS client node participating in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The three-state distributed lease. Variants are declared in strength
/// order so the derived `Ord` is `Null < Read < Write`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LeaseType {
    #[default]
    Null,
    Read,
    Write,
}

impl LeaseType {
    pub fn as_u8(self) -> u8 {
        match self {
            LeaseType::Null => 0,
            LeaseType::Read => 1,
            LeaseType::Write => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(LeaseType::Null),
            1 => Some(LeaseType::Read),
            2 => Some(LeaseType::Write),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LeaseType::Null => "null",
            LeaseType::Read => "read",
            LeaseType::Write => "write",
        }
    }
}

impl fmt::Display for LeaseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LeaseType {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "null" => Ok(LeaseType::Null),
            "read" => Ok(LeaseType::Read),
            "write" => Ok(LeaseType::Write),
            _ => Err(ParseError(s.into())),
        }
    }
}

/// What an I/O operation needs from the lease.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Intent {
    Read,
    Write,
}

impl Intent {
    pub fn lease(self) -> LeaseType {
        match self {
            Intent::Read => LeaseType::Read,
            Intent::Write => LeaseType::Write,
        }
    }

    pub fn from_lease(ty: LeaseType) -> Option<Self> {
        match ty {
            LeaseType::Null => None,
            LeaseType::Read => Some(Intent::Read),
            LeaseType::Write => Some(Intent::Write),
        }
    }
}

/// True iff holding `held` permits an operation with `intent`.
pub fn lease_satisfies(held: LeaseType, intent: Intent) -> bool {
    match intent {
        Intent::Read => matches!(held, LeaseType::Read | LeaseType::Write),
        Intent::Write => held == LeaseType::Write,
    }
}

/// Caching discipline of every node in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheMode {
    /// Write-back kernel cache with the lease checked inside the kernel.
    WriteBackLease,
    /// Write-through to the daemon, which checks the lease; revocation uses
    /// optimistic invalidation.
    WriteThroughOcc,
    /// Write-back with no coordination at all. Deliberately incoherent.
    WriteBackUnsafe,
}

impl CacheMode {
    pub fn name(self) -> &'static str {
        match self {
            CacheMode::WriteBackLease => "writeback",
            CacheMode::WriteThroughOcc => "writethrough-occ",
            CacheMode::WriteBackUnsafe => "unsafe",
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CacheMode {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "writeback" => Ok(CacheMode::WriteBackLease),
            "writethrough-occ" => Ok(CacheMode::WriteThroughOcc),
            "unsafe" => Ok(CacheMode::WriteBackUnsafe),
            _ => Err(ParseError(s.into())),
        }
    }
}

/// Exactly one page of file content.
#[derive(Clone, PartialEq, Eq)]
pub struct PageData(Box<[u8; PAGE_SIZE]>);

impl PageData {
    pub fn zeroed() -> Self {
        PageData(Box::new([0u8; PAGE_SIZE]))
    }

    /// Fails unless `bytes` is exactly one page long.
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        let arr: [u8; PAGE_SIZE] = bytes.try_into().ok()?;
        Some(PageData(Box::new(arr)))
    }

    /// A page filled with a repeating pattern derived from `label`; used by
    /// tests and workloads to produce distinguishable contents.
    pub fn patterned(label: u64) -> Self {
        let mut page = Self::zeroed();
        let mut x = label.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        for chunk in page.0.chunks_exact_mut(8) {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            chunk.copy_from_slice(&x.to_le_bytes());
        }
        page
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0[..]
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.0[..]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    /// 64-bit FNV-1a digest of the content.
    pub fn digest(&self) -> u64 {
        digest_bytes(self.as_slice())
    }
}

impl fmt::Debug for PageData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PageData({:016x})", self.digest())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digest of the all-zero page, the initial value of every page.
pub fn zero_page_digest() -> u64 {
    use std::sync::OnceLock;
    static DIGEST: OnceLock<u64> = OnceLock::new();
    *DIGEST.get_or_init(|| PageData::zeroed().digest())
}

/// A cached page as seen by the kernel tier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Page {
    pub gfi: Gfi,
    pub index: u64,
    pub data: PageData,
    pub dirty: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn satisfies_examples() {
        assert!(lease_satisfies(LeaseType::Write, Intent::Read));
        assert!(!lease_satisfies(LeaseType::Null, Intent::Read));
        assert!(!lease_satisfies(LeaseType::Read, Intent::Write));
    }

    #[test]
    fn satisfies_matches_strength_order() {
        for held in [LeaseType::Null, LeaseType::Read, LeaseType::Write] {
            for intent in [Intent::Read, Intent::Write] {
                assert_eq!(lease_satisfies(held, intent), held >= intent.lease());
            }
        }
    }

    #[test]
    fn gfi_text_form() {
        let g = Gfi::new(3, 77);
        assert_eq!(g.to_string(), "3:77");
        assert_eq!("3:77".parse::<Gfi>().unwrap(), g);
        assert!("377".parse::<Gfi>().is_err());
    }

    #[test]
    fn page_from_slice_checks_length() {
        assert!(PageData::from_slice(&[0u8; 10]).is_none());
        assert!(PageData::from_slice(&[0u8; PAGE_SIZE]).unwrap().is_zero());
        assert_ne!(PageData::patterned(1), PageData::patterned(2));
    }

    fn gfi() -> impl Strategy<Value = Gfi> {
        (0u16..4, 0u64..6).prop_map(|(n, i)| Gfi::new(n, i))
    }

    proptest! {
        #[test]
        fn gfi_order_is_total_and_strict(a in gfi(), b in gfi(), c in gfi()) {
            // exactly one of <, =, >
            let rels = [a < b, a == b, a > b];
            prop_assert_eq!(rels.iter().filter(|r| **r).count(), 1);
            prop_assert_eq!(a == b, a.storage_node == b.storage_node && a.inode == b.inode);
            if a < b && b < c {
                prop_assert!(a < c);
            }
            if a < b {
                prop_assert!(!(b < a));
            }
        }
    }
}
