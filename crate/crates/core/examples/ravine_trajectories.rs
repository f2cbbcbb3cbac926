//! Plain linear scalarization against scalarization with teleportation on the
//! ravine toy, from every documented adversarial start. Prints the trajectory
//! every 200 steps, the final Pareto-stationarity gap, and the teleports.
//!
//! Run with `cargo run --release --example ravine_trajectories`.

use mtl_teleport::harness::{run_experiment_with, RunConfig};
use mtl_teleport::problems::RAVINE_INITS;

fn config(init: [f64; 2], teleport: bool) -> mtl_teleport::Result<RunConfig> {
    RunConfig::from_toml(&format!(
        r#"
seed = 0
[suite]
kind = "ravine"
init = [{}, {}]
[teleport]
enabled = {teleport}
rank = 1
inner_steps = 20
inner_lr = 0.05
[optimizer]
name = "adam"
lr = 0.01
[training]
epochs = 20
steps_per_epoch = 100
"#,
        init[0], init[1]
    ))
}

fn main() -> mtl_teleport::Result<()> {
    for init in RAVINE_INITS {
        println!("start {init:?}");
        for teleport in [false, true] {
            let mut path = Vec::new();
            let rec = run_experiment_with(&config(init, teleport)?, None, &mut |row, model, _| {
                if (row.epoch * 100 + row.step) % 200 == 199 {
                    let t = model.backbone.values();
                    path.push(format!("({:.2}, {:.2})", t[0], t[1]));
                }
            })
            .map_err(|f| f.error)?;
            let first_trigger = rec.steps.iter().position(|r| r.dominated);
            println!(
                "  {:<8} gap {:.2e}  first trigger at step {:?}  teleports {}",
                if teleport { "ls+teleport" } else { "ls" },
                rec.final_stat_gap,
                first_trigger,
                rec.teleports.len()
            );
            println!("           path {}", path.join(" "));
            if let Some(t) = rec.teleports.first() {
                println!(
                    "           first teleport at step {}: |delta| {:.1e}, sigma {:?}, Lt {:.1e}",
                    t.epoch * 100 + t.step,
                    t.outcome.delta_theta.iter().map(|d| d * d).sum::<f64>().sqrt(),
                    t.sigma,
                    t.outcome.lt_final
                );
            }
        }
    }
    Ok(())
}
