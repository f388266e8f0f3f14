use std::fs::File;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use leasefs::bench::{self, Axis, Pattern, Transport, WorkloadSpec, STORAGE_ENV};
use leasefs::cost::CostModel;
use leasefs::manager::{Manager, ManagerConfig};
use leasefs::storage::{StorageClient, StorageNode};
use leasefs::tcp::{TcpPeer, TcpServer};
use leasefs::transport::Endpoint;
use leasefs::types::CacheMode;

#[derive(Parser)]
#[command(name = "bench", about = "fio-style workloads against leasefs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and pre-write the files of a workload on tcp storage.
    Prepare(Workload),
    /// Run one workload and write a CSV row.
    Run {
        #[command(flatten)]
        w: Workload,
        /// Repeat and keep the median run.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Run every value of an axis under both coherent modes.
    Sweep {
        #[command(flatten)]
        w: Workload,
        #[arg(long, value_parser = clap::value_parser!(Axis))]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Also run the unsafe mode.
        #[arg(long)]
        unsafe_mode: bool,
    },
    /// Host a lease manager and a storage node over tcp.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        manager: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:7071")]
        storage: SocketAddr,
        /// Persist storage here instead of memory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Convert a sweep CSV into gnuplot columns.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Workload {
    #[arg(long, default_value = "writeback")]
    mode: CacheMode,
    #[arg(long, default_value = "rand")]
    pattern: Pattern,
    /// Read percentage.
    #[arg(long, default_value_t = 50)]
    rw: u8,
    #[arg(long, default_value_t = 0)]
    contention: u8,
    #[arg(long, default_value_t = 2)]
    nodes: usize,
    /// Threads per node.
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Files per node.
    #[arg(long, default_value_t = 10)]
    files: usize,
    #[arg(long, default_value_t = 1 << 20)]
    file_size: u64,
    #[arg(long, default_value_t = 4096)]
    io_size: usize,
    /// Seconds per run.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Stop each thread after this many operations instead.
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "loopback")]
    transport: Transport,
    /// Drop the simulated syscall, crossing and rpc costs.
    #[arg(long)]
    no_cost: bool,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Workload {
    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            mode: self.mode,
            pattern: self.pattern,
            read_pct: self.rw,
            nodes: self.nodes,
            threads: self.threads,
            files: self.files,
            file_size: self.file_size,
            io_size: self.io_size,
            contention: self.contention,
            duration: Duration::from_secs_f64(self.duration),
            ops_per_thread: self.ops,
            seed: self.seed,
            transport: self.transport,
            cost: if self.no_cost { CostModel::zero() } else { CostModel::desk() },
        }
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout()),
    })
}

fn tcp_storage() -> Result<StorageClient, String> {
    let list = std::env::var(STORAGE_ENV).map_err(|_| format!("{STORAGE_ENV} is not set"))?;
    let mut eps: Vec<Arc<dyn Endpoint>> = Vec::new();
    for a in list.split(',') {
        let addr: SocketAddr = a.trim().parse().map_err(|_| format!("bad address {a}"))?;
        eps.push(TcpPeer::connect(addr, None).map_err(|e| format!("{addr}: {e}"))?);
    }
    Ok(StorageClient::new(eps))
}

fn main_inner(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Prepare(w) => {
            let spec = w.spec();
            let storage = tcp_storage()?;
            bench::prepare(&spec, &storage).map_err(|e| e.to_string())?;
            eprintln!("prepared {} files", spec.all_files().len());
        }
        Cmd::Run { w, runs } => {
            let r = bench::run_median(&w.spec(), runs).map_err(|e| e.to_string())?;
            bench::write_runs_csv(output(&w.out).map_err(|e| e.to_string())?, std::slice::from_ref(&r))
                .map_err(|e| e.to_string())?;
            if !r.valid {
                return Err(format!("run invalid: {}", r.error.unwrap_or_default()));
            }
        }
        Cmd::Sweep {
            w,
            axis,
            values,
            runs,
            unsafe_mode,
        } => {
            let mut modes = vec![CacheMode::WriteBackLease, CacheMode::WriteThroughOcc];
            if unsafe_mode {
                modes.push(CacheMode::WriteBackUnsafe);
            }
            let rows = bench::sweep(axis, &values, &w.spec(), &modes, runs);
            bench::write_sweep_csv(output(&w.out).map_err(|e| e.to_string())?, &rows).map_err(|e| e.to_string())?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                return Err(format!("{failed} cells failed"));
            }
        }
        Cmd::Serve { manager, storage, dir } => {
            let node = match dir {
                Some(d) => StorageNode::open_dir(0, d).map_err(|e| e.to_string())?,
                None => StorageNode::in_memory(0),
            };
            let _s = TcpServer::serve(storage, node).map_err(|e| e.to_string())?;
            let _m = TcpServer::serve_manager(manager, Manager::new(ManagerConfig::default()))
                .map_err(|e| e.to_string())?;
            println!("LEASEFS_MANAGER={manager}");
            println!("LEASEFS_STORAGE={storage}");
            loop {
                std::thread::park();
            }
        }
        Cmd::Plot { input, out } => {
            let text = bench::plot_columns(File::open(&input).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            output(&out)
                .and_then(|mut o| o.write_all(text.as_bytes()))
                .map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
