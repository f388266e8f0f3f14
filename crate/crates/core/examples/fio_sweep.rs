//! A small contention sweep over both coherent modes, printed as CSV and as
//! gnuplot columns.

use std::time::Duration;

use leasefs::bench::{plot_columns, sweep, write_sweep_csv, Axis, WorkloadSpec};
use leasefs::cost::CostModel;
use leasefs::types::CacheMode;

pub fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = WorkloadSpec {
        files: 4,
        file_size: 256 * 1024,
        duration: Duration::from_millis(300),
        cost: CostModel::zero(),
        ..Default::default()
    };
    let rows = sweep(
        Axis::Contention,
        &[0, 50, 100],
        &base,
        &[CacheMode::WriteBackLease, CacheMode::WriteThroughOcc],
        1,
    );
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    print!("{}", String::from_utf8(csv.clone())?);
    print!("{}", plot_columns(&csv[..])?);
    Ok(())
}
