//! SGD with the horizon-dependent step size `1 / (smoothness · √(T − 1))` on
//! the quadratic pair: the smallest squared mean-gradient norm seen so far
//! shrinks as the horizon grows.
//!
//! Run with `cargo run --release --example step_size_decay`.

use mtl_teleport::harness::{run_experiment, RunConfig};
use mtl_teleport::optimizers::Sgd;

fn main() -> mtl_teleport::Result<()> {
    for horizon in [16, 64, 256, 1024, 4096] {
        let mut mins = Vec::new();
        for seed in 0..5 {
            let cfg = RunConfig::from_toml(&format!(
                r#"
seed = {seed}
[suite]
kind = "quadratic"
a = [0.0, 0.0]
b = [1.0, 0.0]
scales = [1.0, 100.0]
[teleport]
enabled = true
rank = 1
delayed_start_epochs = 0
[optimizer]
name = "sgd"
smoothness = 200.0
[training]
epochs = 1
steps_per_epoch = {horizon}
"#
            ))?;
            let rec = run_experiment(&cfg).map_err(|f| f.error)?;
            mins.push(rec.steps.iter().map(|r| r.grad_norm * r.grad_norm).fold(f64::INFINITY, f64::min));
        }
        println!(
            "T = {horizon:>4}: step size {:.2e}, running-min squared gradient norm per seed {:?}",
            Sgd::horizon_step_size(200.0, horizon)?,
            mins.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}
