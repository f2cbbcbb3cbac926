//! The two trigger rules on hand-made gradient sets, and the conflict ratio
//! over a short training run.
//!
//! Run with `cargo run --release --example conflict_detection`.

use mtl_teleport::conflict::{conflict_ratio, detect_dominated, GradientMatrix, TriggerRule};
use mtl_teleport::harness::{run_experiment_with, RunConfig};

fn show(label: &str, rows: &[Vec<f64>]) -> mtl_teleport::Result<()> {
    let g = GradientMatrix::from_rows(rows)?;
    let r = detect_dominated(&g, 0, 0)?;
    let many = TriggerRule { cutoff: 2, many_task_threshold: None };
    println!(
        "{label}: cos with mean {:?}, smallest-norm task {}, dominated {}, against-mean count {}, many-task rule fires {}",
        r.mean_cos.iter().map(|c| (c * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        r.min_norm_task,
        r.dominated,
        r.many_task_count,
        many.fires(&r)
    );
    Ok(())
}

fn main() -> mtl_teleport::Result<()> {
    show("steep second task", &[vec![1.0, 0.0], vec![-100.0, 0.0]])?;
    show("orthogonal pair  ", &[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    show("two of three     ", &[vec![10.0, 0.0], vec![-1.0, 1.0], vec![-1.0, -1.0]])?;
    show("one of three     ", &[vec![1.0, 0.0], vec![1.0, 1.0], vec![-0.5, 0.0]])?;

    let cfg = RunConfig::from_toml(
        r#"
seed = 1
[suite]
kind = "synthetic"
tasks = 8
d_in = 16
samples = 256
[optimizer]
name = "adam"
lr = 0.001
[training]
epochs = 3
steps_per_epoch = 50
"#,
    )?;
    let mut reports = Vec::new();
    run_experiment_with(&cfg, None, &mut |row, model, batches| {
        let grads = model.task_gradients(batches).expect("finite gradients");
        let g = GradientMatrix::new(grads.into_iter().map(|g| g.backbone).collect()).expect("rows");
        reports.push(detect_dominated(&g, row.epoch, row.step).expect("K >= 2"));
    })
    .map_err(|f| f.error)?;
    for epoch in 0..3 {
        println!("epoch {epoch}: conflict ratio {:.2} (after each step)", conflict_ratio(&reports, epoch)?);
    }
    Ok(())
}
