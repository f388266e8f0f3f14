//! fio-style workload driver: file layout, timed multi-node runs, sweeps and
//! CSV output.

pub mod workload;

use std::io::{Read, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use crate::client::{ClientConfig, ClientNode, NodeStats};
use crate::cluster::{Cluster, ClusterConfig};
use crate::error::{Error, Result};
use crate::manager::{Manager, ManagerConfig};
use crate::storage::{StorageClient, StorageNode};
use crate::tcp::{connect_node, TcpPeer, TcpServer};
use crate::transport::Endpoint;
use crate::types::{CacheMode, NodeId, PageData, PAGE_SIZE};

pub use workload::{Op, OpStream, OpType, Pattern, Transport, WorkloadSpec};

pub const MANAGER_ENV: &str = "LEASEFS_MANAGER";
pub const STORAGE_ENV: &str = "LEASEFS_STORAGE";

/// Outcome of one run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: WorkloadSpec,
    pub elapsed: Duration,
    /// Bytes per second of each node.
    pub per_node: Vec<f64>,
    /// Sum of `per_node`.
    pub aggregate: f64,
    pub ops: u64,
    pub bytes: u64,
    pub mean_latency_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub round_trips: u64,
    pub lease_acquisitions: u64,
    pub revocations: u64,
    pub occ_aborts: u64,
    /// Operations refused with a retriable lease error.
    pub unavailable: u64,
    /// False when a node failed and the numbers are partial.
    pub valid: bool,
    pub error: Option<String>,
}

impl RunResult {
    pub const COLUMNS: [&'static str; 16] = [
        "elapsed_s",
        "ops",
        "bytes",
        "throughput_bps",
        "per_node_bps",
        "mean_latency_us",
        "p50_us",
        "p99_us",
        "round_trips",
        "lease_acquisitions",
        "revocations",
        "occ_aborts",
        "unavailable",
        "valid",
        "error",
        "throughput_mibps",
    ];

    fn values(&self) -> Vec<String> {
        vec![
            format!("{:.3}", self.elapsed.as_secs_f64()),
            self.ops.to_string(),
            self.bytes.to_string(),
            format!("{:.0}", self.aggregate),
            self.per_node.iter().map(|b| format!("{b:.0}")).collect::<Vec<_>>().join(";"),
            format!("{:.1}", self.mean_latency_us),
            format!("{:.1}", self.p50_us),
            format!("{:.1}", self.p99_us),
            self.round_trips.to_string(),
            self.lease_acquisitions.to_string(),
            self.revocations.to_string(),
            self.occ_aborts.to_string(),
            self.unavailable.to_string(),
            self.valid.to_string(),
            self.error.clone().unwrap_or_default(),
            format!("{:.2}", self.aggregate / (1024.0 * 1024.0)),
        ]
    }
}

/// Creates every file of the run and fills it to `file_size`.
pub fn prepare(spec: &WorkloadSpec, storage: &StorageClient) -> Result<()> {
    spec.validate().map_err(Error::Protocol)?;
    let pages = spec.file_size.div_ceil(PAGE_SIZE as u64);
    for (n, path) in spec.all_files().iter().enumerate() {
        let (gfi, length) = match storage.create(path) {
            Ok(gfi) => (gfi, 0),
            Err(Error::AlreadyExists(_)) => storage.resolve(path)?,
            Err(e) => return Err(e),
        };
        if length >= spec.file_size {
            continue;
        }
        let mut batch = Vec::new();
        for i in 0..pages {
            batch.push((i, PageData::patterned((n as u64) << 32 | i)));
            if batch.len() == 64 || i + 1 == pages {
                storage.write_pages(gfi, &batch)?;
                batch.clear();
            }
        }
    }
    Ok(())
}

/// A set of connected nodes plus whatever keeps them running.
struct Deployment {
    nodes: Vec<Arc<ClientNode>>,
    storage: StorageClient,
    _cluster: Option<Cluster>,
    _servers: Vec<TcpServer>,
}

fn client_config(spec: &WorkloadSpec) -> ClientConfig {
    let mut c = ClientConfig::new(spec.mode);
    c.cost = spec.cost;
    c
}

fn deploy(spec: &WorkloadSpec) -> Result<Deployment> {
    match spec.transport {
        Transport::Loopback => {
            let mut cfg = ClusterConfig::new(spec.mode, spec.nodes);
            cfg.client = client_config(spec);
            let cluster = Cluster::new(cfg)?;
            Ok(Deployment {
                nodes: cluster.nodes().to_vec(),
                storage: cluster.storage_client(),
                _cluster: Some(cluster),
                _servers: Vec::new(),
            })
        }
        Transport::Tcp => {
            let mut servers = Vec::new();
            let manager_addr: SocketAddr = match std::env::var(MANAGER_ENV) {
                Ok(a) => a.parse().map_err(|_| Error::Protocol(format!("bad {MANAGER_ENV}: {a}")))?,
                Err(_) => {
                    let s = TcpServer::serve_manager("127.0.0.1:0", Manager::new(ManagerConfig::default()))?;
                    let a = s.local_addr();
                    servers.push(s);
                    a
                }
            };
            let storage_addrs: Vec<SocketAddr> = match std::env::var(STORAGE_ENV) {
                Ok(list) => list
                    .split(',')
                    .map(|a| a.trim().parse().map_err(|_| Error::Protocol(format!("bad {STORAGE_ENV}: {a}"))))
                    .collect::<Result<_>>()?,
                Err(_) => {
                    let s = TcpServer::serve("127.0.0.1:0", StorageNode::in_memory(0))?;
                    let a = s.local_addr();
                    servers.push(s);
                    vec![a]
                }
            };
            let mut nodes = Vec::new();
            for i in 1..=spec.nodes {
                nodes.push(connect_node(NodeId(i as u32), client_config(spec), manager_addr, &storage_addrs)?);
            }
            let mut eps: Vec<Arc<dyn Endpoint>> = Vec::new();
            for a in &storage_addrs {
                eps.push(TcpPeer::connect(a, None)?);
            }
            Ok(Deployment {
                nodes,
                storage: StorageClient::new(eps),
                _cluster: None,
                _servers: servers,
            })
        }
    }
}

#[derive(Default)]
struct WorkerOutcome {
    ops: u64,
    bytes: u64,
    latencies: Vec<u64>,
    unavailable: u64,
    error: Option<String>,
}

fn worker(
    spec: &WorkloadSpec,
    node: &ClientNode,
    node_no: usize,
    thread: usize,
    start: &Barrier,
    abort: &AtomicBool,
) -> WorkerOutcome {
    let mut out = WorkerOutcome::default();
    let mut fds = Vec::new();
    for path in spec.node_files(node_no) {
        match node.open(&path, false) {
            Ok(fd) => fds.push(fd),
            Err(e) => {
                out.error = Some(format!("open {path}: {e}"));
                abort.store(true, Ordering::Release);
            }
        }
    }
    let payload = vec![(node_no * 16 + thread) as u8; spec.io_size];
    start.wait();
    let deadline = Instant::now() + spec.duration;
    let mut stream = OpStream::new(spec, node_no, thread);
    while out.error.is_none() && !abort.load(Ordering::Acquire) {
        match spec.ops_per_thread {
            Some(n) if out.ops >= n => break,
            None if Instant::now() >= deadline => break,
            _ => {}
        }
        let op = stream.next().expect("endless stream");
        let fd = fds[op.file];
        let t = Instant::now();
        let r = match op.kind {
            OpType::Read => node.read(fd, op.offset, spec.io_size).map(|v| v.len()),
            OpType::Write => node.write(fd, op.offset, &payload),
        };
        match r {
            Ok(n) => {
                out.latencies.push(t.elapsed().as_nanos() as u64);
                out.ops += 1;
                out.bytes += n as u64;
            }
            Err(Error::LeaseUnavailable(_)) => out.unavailable += 1,
            Err(e) => {
                out.error = Some(e.to_string());
                abort.store(true, Ordering::Release);
            }
        }
    }
    out
}

/// Nearest-rank percentile of sorted nanosecond samples, in microseconds.
fn percentile_us(sorted: &[u64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)] as f64 / 1000.0
}

fn diff(after: NodeStats, before: NodeStats) -> NodeStats {
    NodeStats {
        round_trips: after.round_trips - before.round_trips,
        lease_upcalls: after.lease_upcalls - before.lease_upcalls,
        grant_requests: after.grant_requests - before.grant_requests,
        revocations: after.revocations - before.revocations,
        occ_aborts: after.occ_aborts - before.occ_aborts,
        occ_passes: after.occ_passes - before.occ_passes,
        occ_livelocks: after.occ_livelocks - before.occ_livelocks,
        fallbacks: after.fallbacks - before.fallbacks,
        storage_reads: after.storage_reads - before.storage_reads,
        storage_writes: after.storage_writes - before.storage_writes,
    }
}

/// Prepares the files and runs the workload once.
pub fn run(spec: &WorkloadSpec) -> Result<RunResult> {
    spec.validate().map_err(Error::Protocol)?;
    let dep = deploy(spec)?;
    prepare(spec, &dep.storage)?;
    let before: Vec<NodeStats> = dep.nodes.iter().map(|n| n.stats()).collect();
    let start = Barrier::new(spec.nodes * spec.threads + 1);
    let abort = AtomicBool::new(false);
    let mut outcomes: Vec<Vec<WorkerOutcome>> = Vec::new();
    let mut elapsed = Duration::ZERO;
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (i, node) in dep.nodes.iter().enumerate() {
            let mut per_node = Vec::new();
            for t in 0..spec.threads {
                let (start, abort) = (&start, &abort);
                per_node.push(s.spawn(move || worker(spec, node, i + 1, t, start, abort)));
            }
            handles.push(per_node);
        }
        start.wait();
        let t0 = Instant::now();
        for per_node in handles {
            outcomes.push(per_node.into_iter().map(|h| h.join().unwrap_or_default()).collect());
        }
        elapsed = t0.elapsed();
    });
    let after: Vec<NodeStats> = dep.nodes.iter().map(|n| n.stats()).collect();
    let delta: Vec<NodeStats> = after.into_iter().zip(before).map(|(a, b)| diff(a, b)).collect();

    let secs = elapsed.as_secs_f64().max(1e-9);
    let per_node: Vec<f64> = outcomes
        .iter()
        .map(|ws| ws.iter().map(|w| w.bytes).sum::<u64>() as f64 / secs)
        .collect();
    let mut lat: Vec<u64> = outcomes.iter().flatten().flat_map(|w| w.latencies.iter().copied()).collect();
    lat.sort_unstable();
    let all = || outcomes.iter().flatten();
    let error = all().find_map(|w| w.error.clone());
    Ok(RunResult {
        spec: *spec,
        elapsed,
        aggregate: per_node.iter().sum(),
        per_node,
        ops: all().map(|w| w.ops).sum(),
        bytes: all().map(|w| w.bytes).sum(),
        mean_latency_us: if lat.is_empty() {
            0.0
        } else {
            lat.iter().sum::<u64>() as f64 / lat.len() as f64 / 1000.0
        },
        p50_us: percentile_us(&lat, 50.0),
        p99_us: percentile_us(&lat, 99.0),
        round_trips: delta.iter().map(|d| d.round_trips).sum(),
        lease_acquisitions: delta.iter().map(|d| d.grant_requests).sum(),
        revocations: delta.iter().map(|d| d.revocations).sum(),
        occ_aborts: delta.iter().map(|d| d.occ_aborts).sum(),
        unavailable: all().map(|w| w.unavailable).sum(),
        valid: error.is_none(),
        error,
    })
}

/// Runs `spec` `runs` times and returns the run with the median aggregate
/// throughput.
pub fn run_median(spec: &WorkloadSpec, runs: usize) -> Result<RunResult> {
    let mut results = Vec::new();
    for _ in 0..runs.max(1) {
        results.push(run(spec)?);
    }
    results.sort_by(|a, b| a.aggregate.total_cmp(&b.aggregate));
    Ok(results.swap_remove(results.len() / 2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Contention,
    Nodes,
    RwRatio,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Contention => "contention",
            Axis::Nodes => "nodes",
            Axis::RwRatio => "rw",
        }
    }

    pub fn apply(self, spec: &mut WorkloadSpec, value: u64) {
        match self {
            Axis::Contention => spec.contention = value.min(100) as u8,
            Axis::Nodes => spec.nodes = value as usize,
            Axis::RwRatio => spec.read_pct = value.min(100) as u8,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = crate::types::ParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "contention" => Ok(Axis::Contention),
            "nodes" => Ok(Axis::Nodes),
            "rw" | "rw_ratio" => Ok(Axis::RwRatio),
            _ => Err(crate::types::ParseError(s.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: u64,
    pub mode: CacheMode,
    pub result: std::result::Result<RunResult, String>,
}

/// Runs every value under every mode. A failing cell is kept as an error
/// row and the sweep carries on.
pub fn sweep(axis: Axis, values: &[u64], base: &WorkloadSpec, modes: &[CacheMode], runs: usize) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &value in values {
        for &mode in modes {
            let mut spec = *base;
            spec.mode = mode;
            axis.apply(&mut spec, value);
            let result = run_median(&spec, runs).map_err(|e| e.to_string());
            rows.push(SweepRow {
                axis,
                value,
                mode,
                result,
            });
        }
    }
    rows
}

/// One row per run: every spec field, then every result column.
pub fn write_runs_csv(out: impl Write, results: &[RunResult]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = WorkloadSpec::default().fields().iter().map(|f| f.0).collect();
    header.extend(RunResult::COLUMNS);
    w.write_record(&header)?;
    for r in results {
        let mut row: Vec<String> = r.spec.fields().into_iter().map(|f| f.1).collect();
        row.extend(r.values());
        w.write_record(&row)?;
    }
    w.flush()
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "axis",
    "value",
    "mode",
    "throughput_bps",
    "mean_latency_us",
    "p99_us",
    "round_trips",
    "aborts",
    "valid",
    "error",
];

/// Sweep table; failed cells carry the error and empty numbers.
pub fn write_sweep_csv(out: impl Write, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for row in rows {
        let mut rec = vec![row.axis.name().to_string(), row.value.to_string(), row.mode.name().to_string()];
        match &row.result {
            Ok(r) => rec.extend([
                format!("{:.0}", r.aggregate),
                format!("{:.1}", r.mean_latency_us),
                format!("{:.1}", r.p99_us),
                r.round_trips.to_string(),
                r.occ_aborts.to_string(),
                r.valid.to_string(),
                r.error.clone().unwrap_or_default(),
            ]),
            Err(e) => rec.extend([
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
                e.clone(),
            ]),
        }
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Turns a sweep CSV into whitespace-separated columns for gnuplot: the
/// axis value, then the throughput in MiB/s of each mode in order of first
/// appearance. Missing cells print `?`.
pub fn plot_columns(sweep_csv: impl Read) -> std::result::Result<String, csv::Error> {
    let mut r = csv::Reader::from_reader(sweep_csv);
    let mut modes: Vec<String> = Vec::new();
    let mut cells: std::collections::BTreeMap<u64, std::collections::HashMap<String, f64>> = Default::default();
    let mut axis = String::from("value");
    for rec in r.records() {
        let rec = rec?;
        axis = rec.get(0).unwrap_or("value").to_string();
        let value: u64 = rec.get(1).and_then(|v| v.parse().ok()).unwrap_or(0);
        let mode = rec.get(2).unwrap_or("").to_string();
        if !modes.contains(&mode) {
            modes.push(mode.clone());
        }
        let entry = cells.entry(value).or_default();
        if let Some(t) = rec.get(3).and_then(|t| t.parse::<f64>().ok()) {
            entry.insert(mode, t / (1024.0 * 1024.0));
        }
    }
    let mut out = format!("# {axis} {}\n", modes.join(" "));
    for (value, by_mode) in cells {
        out.push_str(&value.to_string());
        for m in &modes {
            match by_mode.get(m) {
                Some(t) => out.push_str(&format!(" {t:.3}")),
                None => out.push_str(" ?"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
