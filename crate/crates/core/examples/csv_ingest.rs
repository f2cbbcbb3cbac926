//! Load a multi-task regression set from CSV, train with CAGrad plus
//! teleportation, and write the run artifacts.
//!
//! Run with `cargo run --release --example csv_ingest [out-dir]`.

use std::path::{Path, PathBuf};

use mtl_teleport::harness::{emit_outputs, run_experiment_with, RunConfig};
use mtl_teleport::problems::{load_csv_dataset, CsvSchema};

fn main() -> mtl_teleport::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let suite = load_csv_dataset(
        root.join("data/three_tasks.csv"),
        CsvSchema { d_in: 4, d_out: 1, task_column: true },
    )?;
    let data = suite.data.as_ref().expect("csv suites carry data");
    println!("{}: {} tasks, rows per task {:?}", suite.name, suite.num_tasks(), data.iter().map(|b| b.len()).collect::<Vec<_>>());

    let config_path = root.join("configs/csv_three_tasks.toml");
    let cfg = RunConfig::load(&config_path)?;
    let rec = run_experiment_with(&cfg, config_path.parent(), &mut |_, _, _| {}).map_err(|f| f.error)?;
    for m in &rec.metrics {
        println!("{:<9} {:.5}", m.metric, m.value);
    }
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("csv_ingest_run"));
    emit_outputs(&rec, &out)?;
    println!("artifacts written to {}", out.display());
    Ok(())
}
