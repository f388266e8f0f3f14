//! Scripted multi-node interleavings.
//!
//! A scenario is line-oriented; each line is one step of one thread:
//!
//! ```text
//! # comment
//! thread action[:args] [barrier]
//! ```
//!
//! `thread` is `nN` or `nN.label`; the number picks the node (from 1) and
//! the whole token names the thread. Steps of one thread run in file
//! order. Actions:
//!
//! | action                  | effect                                          |
//! |-------------------------|-------------------------------------------------|
//! | `write:FILE:PAGE:LABEL` | write the page patterned with `LABEL` (recorded)|
//! | `read:FILE:PAGE`        | read the page (recorded)                        |
//! | `fsync:FILE`            | flush the file to storage                       |
//! | `flush`                 | push the node's dirty kernel pages to its daemon|
//! | `sleep:MICROS`          | pause                                           |
//! | `nop`                   | nothing; useful to attach a barrier             |
//!
//! After its action, a step naming a barrier waits until every thread that
//! names the same barrier has arrived. A thread may name each barrier once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use super::history::{History, OpRecord};
use crate::cluster::{Cluster, ClusterConfig};
use crate::error::Error;
use crate::lockorder::{start_recording, Acquisition, LockClass, WATCHDOG_TIMEOUT};
use crate::types::{CacheMode, Gfi, NodeId, PageData};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Write { file: String, page: u64, label: u64 },
    Read { file: String, page: u64 },
    Fsync { file: String },
    Flush,
    Sleep { micros: u64 },
    Nop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Write { file, page, label } => write!(f, "write:{file}:{page}:{label}"),
            Action::Read { file, page } => write!(f, "read:{file}:{page}"),
            Action::Fsync { file } => write!(f, "fsync:{file}"),
            Action::Flush => write!(f, "flush"),
            Action::Sleep { micros } => write!(f, "sleep:{micros}"),
            Action::Nop => write!(f, "nop"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub thread: String,
    pub node: usize,
    pub action: Action,
    pub barrier: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Scenario {
    pub steps: Vec<Step>,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            write!(f, "{} {}", s.thread, s.action)?;
            if let Some(b) = &s.barrier {
                write!(f, " {b}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("scenario stuck: {0}")]
    Stuck(String),
    #[error("step `{step}` failed: {source}")]
    Step { step: String, source: Error },
    #[error("cluster setup failed: {0}")]
    Setup(Error),
}

fn node_of(thread: &str) -> Option<usize> {
    let digits = thread.strip_prefix('n')?.split('.').next()?;
    digits.parse().ok().filter(|&n| n >= 1)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut steps = Vec::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| ScenarioError::Parse { line: i + 1, reason };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&tokens.len()) {
            return Err(bad(format!("expected `thread action [barrier]`, got {line:?}")));
        }
        let thread = tokens[0].to_string();
        let node = node_of(&thread).ok_or_else(|| bad(format!("bad thread name {thread:?}")))?;
        let action = parse_action(tokens[1]).ok_or_else(|| bad(format!("bad action {:?}", tokens[1])))?;
        let barrier = tokens.get(2).map(|b| b.to_string());
        if let Some(b) = &barrier {
            if !seen.insert((thread.clone(), b.clone())) {
                return Err(bad(format!("{thread} names barrier {b} twice")));
            }
        }
        steps.push(Step {
            thread,
            node,
            action,
            barrier,
        });
    }
    Ok(Scenario { steps })
}

fn parse_action(tok: &str) -> Option<Action> {
    let parts: Vec<&str> = tok.split(':').collect();
    let num = |s: &str| s.parse::<u64>().ok();
    Some(match parts.as_slice() {
        ["write", file, page, label] => Action::Write {
            file: file.to_string(),
            page: num(page)?,
            label: num(label)?,
        },
        ["read", file, page] => Action::Read {
            file: file.to_string(),
            page: num(page)?,
        },
        ["fsync", file] => Action::Fsync { file: file.to_string() },
        ["flush"] => Action::Flush,
        ["sleep", us] => Action::Sleep { micros: num(us)? },
        ["nop"] => Action::Nop,
        _ => return None,
    })
}

impl Scenario {
    pub fn nodes(&self) -> usize {
        self.steps.iter().map(|s| s.node).max().unwrap_or(0)
    }

    pub fn files(&self) -> BTreeSet<String> {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                Action::Write { file, .. } | Action::Read { file, .. } | Action::Fsync { file } => Some(file.clone()),
                _ => None,
            })
            .collect()
    }

    fn threads(&self) -> BTreeMap<String, Vec<Step>> {
        let mut t: BTreeMap<String, Vec<Step>> = BTreeMap::new();
        for s in &self.steps {
            t.entry(s.thread.clone()).or_default().push(s.clone());
        }
        t
    }
}

/// Output of one scheduled run.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub ops: Vec<OpRecord>,
    /// Tracked lock acquisitions made by the scenario's threads.
    pub locks: Vec<Acquisition>,
    /// The manager's grant log after the run.
    pub grant_log: String,
}

#[derive(Clone, Debug)]
pub struct ScheduleConfig {
    pub mode: CacheMode,
    /// Longest wait at a barrier, and for the whole run to drain.
    pub timeout: Duration,
    /// Background flush interval; `None` disables the flusher.
    pub flush_interval: Option<Duration>,
}

impl ScheduleConfig {
    pub fn new(mode: CacheMode) -> Self {
        ScheduleConfig {
            mode,
            timeout: WATCHDOG_TIMEOUT,
            flush_interval: None,
        }
    }
}

#[derive(Default)]
struct Barriers {
    state: Mutex<HashMap<String, (usize, usize)>>,
    cv: Condvar,
}

impl Barriers {
    fn new(s: &Scenario) -> Self {
        let mut m: HashMap<String, (usize, usize)> = HashMap::new();
        for step in &s.steps {
            if let Some(b) = &step.barrier {
                m.entry(b.clone()).or_default().1 += 1;
            }
        }
        Barriers {
            state: Mutex::new(m),
            cv: Condvar::new(),
        }
    }

    fn arrive(&self, name: &str, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        let entry = st.get_mut(name).expect("barrier registered");
        entry.0 += 1;
        self.cv.notify_all();
        loop {
            let (arrived, needed) = st[name];
            if arrived >= needed {
                return true;
            }
            if self.cv.wait_until(&mut st, deadline).timed_out() {
                let (arrived, needed) = st[name];
                return arrived >= needed;
            }
        }
    }
}

static RUN_ID: AtomicU64 = AtomicU64::new(1);

/// Runs `scenario` on a fresh in-process cluster and returns its trace.
pub fn scheduled_interleave(scenario: &Scenario, cfg: &ScheduleConfig) -> Result<Trace, ScenarioError> {
    if scenario.steps.is_empty() {
        return Ok(Trace::default());
    }
    let mut ccfg = ClusterConfig::new(cfg.mode, scenario.nodes());
    ccfg.client.flusher = cfg.flush_interval.is_some();
    if let Some(i) = cfg.flush_interval {
        ccfg.client.flush_interval = i;
    }
    ccfg.manager.backoff = Duration::from_millis(2);
    let cluster = Arc::new(Cluster::new(ccfg).map_err(ScenarioError::Setup)?);
    let storage = cluster.storage_client();
    let mut gfis: HashMap<String, Gfi> = HashMap::new();
    for f in scenario.files() {
        let gfi = storage.create(&f).map_err(ScenarioError::Setup)?;
        gfis.insert(f, gfi);
    }
    for n in cluster.nodes() {
        for f in gfis.keys() {
            n.open(f, false).map_err(ScenarioError::Setup)?;
        }
    }
    let gfis = Arc::new(gfis);
    let history = Arc::new(History::new());
    let barriers = Arc::new(Barriers::new(scenario));
    let prefix = format!("s{}/", RUN_ID.fetch_add(1, Ordering::Relaxed));
    let recording = start_recording();

    let threads = scenario.threads();
    let count = threads.len();
    let (done_tx, done_rx) = mpsc::channel::<Result<(), ScenarioError>>();
    for (name, steps) in threads {
        let cluster = cluster.clone();
        let gfis = gfis.clone();
        let history = history.clone();
        let barriers = barriers.clone();
        let done = done_tx.clone();
        let timeout = cfg.timeout;
        std::thread::Builder::new()
            .name(format!("{prefix}{name}"))
            .spawn(move || {
                let r = run_thread(&cluster, &gfis, &history, &barriers, &steps, timeout);
                let _ = done.send(r);
            })
            .expect("spawn scenario thread");
    }
    drop(done_tx);
    let deadline = Instant::now() + cfg.timeout * (scenario.steps.len() as u32 + 1);
    let mut first_err = None;
    for _ in 0..count {
        let left = deadline.saturating_duration_since(Instant::now());
        match done_rx.recv_timeout(left) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => return Err(ScenarioError::Stuck("a thread never finished".into())),
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let locks = recording
        .finish()
        .into_iter()
        .filter(|a| a.thread.starts_with(&prefix))
        .map(|mut a| {
            a.thread = a.thread[prefix.len()..].to_string();
            a
        })
        .collect();
    Ok(Trace {
        ops: history.ops(),
        locks,
        grant_log: cluster.dump(),
    })
}

fn run_thread(
    cluster: &Cluster,
    gfis: &HashMap<String, Gfi>,
    history: &History,
    barriers: &Barriers,
    steps: &[Step],
    timeout: Duration,
) -> Result<(), ScenarioError> {
    for step in steps {
        let node = cluster.node(step.node);
        let id = NodeId(step.node as u32);
        let failed = |source: Error| ScenarioError::Step {
            step: format!("{} {}", step.thread, step.action),
            source,
        };
        match &step.action {
            Action::Write { file, page, label } => {
                let gfi = gfis[file];
                let data = PageData::patterned(*label);
                history
                    .write(id, gfi, *page, &data, || node.write_page(gfi, *page, &data))
                    .map_err(failed)?;
            }
            Action::Read { file, page } => {
                let gfi = gfis[file];
                history
                    .read(id, gfi, *page, || node.read_page(gfi, *page))
                    .map_err(failed)?;
            }
            Action::Fsync { file } => node.fsync_gfi(gfis[file]).map_err(failed)?,
            Action::Flush => {
                node.flush_now();
            }
            Action::Sleep { micros } => std::thread::sleep(Duration::from_micros(*micros)),
            Action::Nop => {}
        }
        if let Some(b) = &step.barrier {
            if !barriers.arrive(b, timeout) {
                return Err(ScenarioError::Stuck(format!("{} waited at {b}", step.thread)));
            }
        }
    }
    Ok(())
}

/// First acquisition of a lease guard made while the same thread held the
/// inode guard of the same file, if any.
pub fn lease_after_inode(trace: &[Acquisition]) -> Option<&Acquisition> {
    trace
        .iter()
        .find(|a| a.class == LockClass::LeaseGuard && a.held.contains(&(a.gfi, LockClass::InodeGuard)))
}

/// The write-back race: node 1's write completes while the page sits only in
/// its kernel cache, then node 2 reads the page.
pub const WRITE_BACK_RACE: &str = "\
n1 write:f:0:1 b1
n2 nop b1
n2 read:f:0
";

/// Shape of randomly generated scenarios.
#[derive(Clone, Debug)]
pub struct RandomSpec {
    pub nodes: std::ops::RangeInclusive<usize>,
    pub files: std::ops::RangeInclusive<usize>,
    pub pages_per_file: u64,
    /// Reads and writes per page, at most.
    pub ops_per_page: usize,
    /// Chance that a node runs a second thread.
    pub second_thread: f64,
    pub barriers: std::ops::RangeInclusive<usize>,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            nodes: 2..=4,
            files: 1..=2,
            pages_per_file: 2,
            ops_per_page: 12,
            second_thread: 0.3,
            barriers: 0..=6,
        }
    }
}

/// Random scenario. Barriers are drawn from one global sequence, so every
/// thread meets them in the same order and the schedule cannot wedge on
/// barriers alone.
pub fn random_scenario(rng: &mut impl Rng, spec: &RandomSpec) -> Scenario {
    let nodes = rng.gen_range(spec.nodes.clone());
    let files = rng.gen_range(spec.files.clone());
    let mut threads = Vec::new();
    for n in 1..=nodes {
        threads.push(format!("n{n}"));
        if rng.gen_bool(spec.second_thread) {
            threads.push(format!("n{n}.t1"));
        }
    }
    let mut per_thread: Vec<Vec<(Action, Option<String>)>> = vec![Vec::new(); threads.len()];
    let mut label = 0u64;
    let registers: Vec<(usize, u64)> = (0..files)
        .flat_map(|f| (0..spec.pages_per_file).map(move |p| (f, p)))
        .collect();
    let mut budget: HashMap<(usize, u64), usize> = registers.iter().map(|&r| (r, spec.ops_per_page)).collect();
    let total_ops = registers.len() * spec.ops_per_page;
    let steps = rng.gen_range(total_ops / 2..=total_ops);
    for _ in 0..steps {
        let t = rng.gen_range(0..threads.len());
        let roll = rng.gen_range(0..100);
        let action = if roll < 80 {
            let &(f, p) = registers.choose(rng).expect("at least one register");
            let left = budget.get_mut(&(f, p)).expect("budgeted");
            if *left == 0 {
                Action::Nop
            } else {
                *left -= 1;
                let file = format!("f{f}");
                if roll < 40 {
                    label += 1;
                    Action::Write { file, page: p, label }
                } else {
                    Action::Read { file, page: p }
                }
            }
        } else if roll < 87 {
            Action::Fsync {
                file: format!("f{}", rng.gen_range(0..files)),
            }
        } else if roll < 94 {
            Action::Flush
        } else {
            Action::Sleep {
                micros: rng.gen_range(0..300),
            }
        };
        per_thread[t].push((action, None));
    }
    let barriers = rng.gen_range(spec.barriers.clone());
    // position cursor per thread: barriers attach at nondecreasing positions
    let mut cursor = vec![0usize; threads.len()];
    for b in 0..barriers {
        let k = rng.gen_range(2..=threads.len());
        let mut who: Vec<usize> = (0..threads.len()).collect();
        who.shuffle(rng);
        for &t in &who[..k] {
            let len = per_thread[t].len();
            if cursor[t] >= len {
                per_thread[t].push((Action::Nop, None));
            }
            let at = rng.gen_range(cursor[t]..per_thread[t].len());
            if per_thread[t][at].1.is_some() {
                per_thread[t].insert(at + 1, (Action::Nop, None));
                per_thread[t][at + 1].1 = Some(format!("b{b}"));
                cursor[t] = at + 2;
            } else {
                per_thread[t][at].1 = Some(format!("b{b}"));
                cursor[t] = at + 1;
            }
        }
    }
    let mut out = Vec::new();
    for (t, steps) in per_thread.into_iter().enumerate() {
        let node = node_of(&threads[t]).expect("generated thread name");
        for (action, barrier) in steps {
            out.push(Step {
                thread: threads[t].clone(),
                node,
                action,
                barrier,
            });
        }
    }
    Scenario { steps: out }
}

/// The write-back race with random filler around it: unrelated pages,
/// flushes and sleeps on both nodes. The ordering barrier between node 1's
/// write and node 2's read stays.
pub fn random_race_scenario(rng: &mut impl Rng) -> Scenario {
    let mut text = String::new();
    let filler = |rng: &mut dyn rand::RngCore, thread: &str, label: &mut u64, text: &mut String| {
        for _ in 0..rng.gen_range(0..4) {
            let line = match rng.gen_range(0..4) {
                0 => {
                    *label += 1;
                    format!("{thread} write:f:{}:{}\n", rng.gen_range(1..4), 1000 + *label)
                }
                1 => format!("{thread} read:f:{}\n", rng.gen_range(1..4)),
                2 => format!("{thread} flush\n"),
                _ => format!("{thread} sleep:{}\n", rng.gen_range(0..500)),
            };
            text.push_str(&line);
        }
    };
    let mut label = 0;
    filler(rng, "n1", &mut label, &mut text);
    filler(rng, "n2", &mut label, &mut text);
    text.push_str(&format!("n1 write:f:0:{}\n", rng.gen_range(1..1000)));
    filler(rng, "n1", &mut label, &mut text);
    text.push_str("n1 nop b1\n");
    text.push_str("n2 nop b1\n");
    if rng.gen_bool(0.5) {
        text.push_str(&format!("n2 sleep:{}\n", rng.gen_range(0..500)));
    }
    text.push_str("n2 read:f:0\n");
    filler(rng, "n2", &mut label, &mut text);
    parse_scenario(&text).expect("generated race scenario parses")
}
