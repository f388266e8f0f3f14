//! Workload description and the deterministic operation generator.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::CostModel;
use crate::types::{CacheMode, ParseError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Random,
    Sequential,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Random => "rand",
            Pattern::Sequential => "seq",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rand" | "random" => Ok(Pattern::Random),
            "seq" | "sequential" => Ok(Pattern::Sequential),
            _ => Err(ParseError(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    Loopback,
    Tcp,
}

impl Transport {
    pub fn name(self) -> &'static str {
        match self {
            Transport::Loopback => "loopback",
            Transport::Tcp => "tcp",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transport {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(Transport::Loopback),
            "tcp" => Ok(Transport::Tcp),
            _ => Err(ParseError(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub mode: CacheMode,
    pub pattern: Pattern,
    /// Percentage of operations that are reads.
    pub read_pct: u8,
    pub nodes: usize,
    pub threads: usize,
    pub files: usize,
    pub file_size: u64,
    pub io_size: usize,
    /// Percentage of each node's files that every node shares.
    pub contention: u8,
    pub duration: Duration,
    /// Stop each thread after this many operations instead of on time.
    pub ops_per_thread: Option<u64>,
    pub seed: u64,
    pub transport: Transport,
    pub cost: CostModel,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            mode: CacheMode::WriteBackLease,
            pattern: Pattern::Random,
            read_pct: 50,
            nodes: 2,
            threads: 4,
            files: 10,
            file_size: 1 << 20,
            io_size: 4096,
            contention: 0,
            duration: Duration::from_secs(10),
            ops_per_thread: None,
            seed: 1,
            transport: Transport::Loopback,
            cost: CostModel::desk(),
        }
    }
}

impl WorkloadSpec {
    pub fn shared_files(&self) -> usize {
        ((self.contention.min(100) as usize * self.files) as f64 / 100.0).round() as usize
    }

    pub fn private_files(&self) -> usize {
        self.files - self.shared_files()
    }

    /// Paths node `node` (from 1) works on: shared first, then private.
    pub fn node_files(&self, node: usize) -> Vec<String> {
        let mut v: Vec<String> = (0..self.shared_files()).map(|i| format!("shared_{i}")).collect();
        v.extend((0..self.private_files()).map(|j| format!("node{node}_{j}")));
        v
    }

    /// Every path of the run.
    pub fn all_files(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.shared_files()).map(|i| format!("shared_{i}")).collect();
        for n in 1..=self.nodes {
            v.extend((0..self.private_files()).map(|j| format!("node{n}_{j}")));
        }
        v
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.read_pct > 100 || self.contention > 100 {
            return Err("percentages must be within 0..=100".into());
        }
        if self.nodes == 0 || self.threads == 0 || self.files == 0 {
            return Err("nodes, threads and files must be positive".into());
        }
        if self.io_size == 0 || self.file_size < self.io_size as u64 {
            return Err("io size must be positive and fit in a file".into());
        }
        Ok(())
    }

    /// `(name, value)` of every field, in CSV column order.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.name().to_string()),
            ("pattern", self.pattern.name().to_string()),
            ("read_pct", self.read_pct.to_string()),
            ("nodes", self.nodes.to_string()),
            ("threads", self.threads.to_string()),
            ("files", self.files.to_string()),
            ("file_size", self.file_size.to_string()),
            ("io_size", self.io_size.to_string()),
            ("contention", self.contention.to_string()),
            ("duration_s", format!("{:.3}", self.duration.as_secs_f64())),
            (
                "ops_per_thread",
                self.ops_per_thread.map(|n| n.to_string()).unwrap_or_default(),
            ),
            ("seed", self.seed.to_string()),
            ("transport", self.transport.name().to_string()),
            ("syscall_us", self.cost.syscall.as_micros().to_string()),
            ("crossing_us", self.cost.crossing.as_micros().to_string()),
            ("rpc_us", self.cost.rpc.as_micros().to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpType {
    Read,
    Write,
}

/// One generated operation: index into the node's file list, byte offset
/// and kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Op {
    pub file: usize,
    pub offset: u64,
    pub kind: OpType,
}
/// Operation stream of one worker thread; a pure function of the workload,
/// its seed, the node and the thread.
/// node and the thread.
pub struct OpStream {
    rng: ChaCha8Rng,
    files: usize,
    slots: u64,
    io_size: u64,
    read_pct: u8,
    pattern: Pattern,
    cursor: Option<(usize, u64)>,
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, node: usize, thread: usize) -> Self {
        let seed = spec
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((node as u64) << 32)
            .wrapping_add(thread as u64);
        OpStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            files: spec.files,
            slots: spec.file_size / spec.io_size as u64,
            io_size: spec.io_size as u64,
            read_pct: spec.read_pct,
            pattern: spec.pattern,
            cursor: None,
        }
    }
}

impl Iterator for OpStream {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        let kind = if self.rng.gen_range(0..100) < self.read_pct as u32 {
            OpType::Read
        } else {
            OpType::Write
        };
        let (file, slot) = match self.pattern {
            Pattern::Random => (self.rng.gen_range(0..self.files), self.rng.gen_range(0..self.slots)),
            Pattern::Sequential => {
                let (f, s) = match self.cursor {
                    Some((f, s)) if s + 1 < self.slots => (f, s + 1),
                    _ => (self.rng.gen_range(0..self.files), 0),
                };
                self.cursor = Some((f, s));
                (f, s)
            }
        };
        Some(Op {
            file,
            offset: slot * self.io_size,
            kind,
        })
    }
}
