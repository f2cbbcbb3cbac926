//! Every combiner with and without teleportation on the synthetic K=8 suite,
//! scored by relative degradation against single-task baselines and by mean
//! rank over the per-task test losses.
//!
//! Run with `cargo run --release --example synthetic_benchmark`.

use mtl_teleport::conflict::mean_pairwise_cos;
use mtl_teleport::harness::{run_experiment, RunConfig};
use mtl_teleport::metrics::{mean_rank, MetricTable};

const METHODS: [&str; 4] = ["name = \"ls\"", "name = \"pcgrad\"", "name = \"cagrad\"", "name = \"fairgrad\""];

fn main() -> mtl_teleport::Result<()> {
    let base = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/synthetic_k8.toml"))?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut table_meta = None;
    for method in METHODS {
        for teleport in [false, true] {
            let mut cfg = base.clone();
            cfg.method = toml::from_str(method).expect("method table");
            cfg.teleport.enabled = teleport;
            let rec = run_experiment(&cfg).map_err(|f| f.error)?;
            let accepted: Vec<_> = rec.teleports.iter().filter(|t| t.outcome.accepted).collect();
            let grew = accepted.iter().filter(|t| t.outcome.grad_norm_after >= t.outcome.grad_norm_before).count();
            let aligned = accepted
                .iter()
                .filter(|t| mean_pairwise_cos(&t.outcome.pairwise_cos_after) > mean_pairwise_cos(&t.outcome.pairwise_cos_before))
                .count();
            println!(
                "{:<14} delta_m {:>8.2}%  stat gap {:.3}  teleports {:>2} (norm grew {grew}, cosine rose {aligned})",
                rec.method,
                rec.delta_m.unwrap_or(f64::NAN),
                rec.final_stat_gap,
                rec.teleports.len()
            );
            let task: Vec<_> = rec.metrics.iter().filter(|m| m.metric.starts_with("loss_")).collect();
            table_meta.get_or_insert_with(|| {
                (task.iter().map(|m| m.metric.clone()).collect::<Vec<_>>(), task.iter().map(|m| m.direction).collect::<Vec<_>>())
            });
            rows.push(task.iter().map(|m| m.value).collect::<Vec<_>>());
            labels.push(rec.method);
        }
    }
    let (metrics, directions) = table_meta.expect("at least one run");
    let table = MetricTable::new(metrics, directions, labels.clone(), rows)?;
    for (label, mr) in labels.iter().zip(mean_rank(&table)?) {
        println!("{label:<14} mean rank {mr:.2}");
    }
    Ok(())
}
