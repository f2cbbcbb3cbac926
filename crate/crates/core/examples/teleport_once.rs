//! One teleport at a dominated-conflict point of the quadratic pair, repeated
//! over 50 seeds. Prints loss fluctuation, sharpness and gradient norms.
//!
//! Run with `cargo run --release --example teleport_once`.

use mtl_teleport::conflict::{detect_dominated, TriggerRule};
use mtl_teleport::problems::make_quadratic_pair;
use mtl_teleport::teleport::{backbone_gradients, teleport, LossSnapshot, TeleportConfig};

fn main() -> mtl_teleport::Result<()> {
    // Task 2 is 100 times steeper; at the midpoint task 1 is dominated.
    let suite = make_quadratic_pair([0.0, 0.0], [1.0, 0.0], (1.0, 100.0))?;
    let start = suite.model_at(&[0.5, 0.0])?;
    let snapshot = LossSnapshot::record(&start, suite.placeholder_batches())?;
    let grads = backbone_gradients(&start, &snapshot.batches)?;
    let report = detect_dominated(&grads, 0, 0)?;
    println!(
        "losses {:?}, dominated {}, trigger fires {}",
        snapshot.losses,
        report.dominated,
        TriggerRule::default().fires(&report)
    );

    let cfg = TeleportConfig {
        enabled: true,
        rank: 1,
        ..TeleportConfig::default()
    };
    let (mut accepted, mut grew) = (0, 0);
    for seed in 0..50 {
        let mut model = start.clone();
        let out = teleport(&mut model, &snapshot, &grads, &cfg, seed)?;
        if out.accepted {
            accepted += 1;
            if out.grad_norm_after >= out.grad_norm_before {
                grew += 1;
            }
        }
        if seed < 5 {
            println!(
                "seed {seed}: accepted {} Lt {:.3e} (tol {:.3e}) Lg {:.4} -> {:.4} |g| {:.6} -> {:.6} theta {:?}",
                out.accepted,
                out.lt_final,
                out.lt_tolerance,
                out.lg_initial,
                out.lg_final,
                out.grad_norm_before,
                out.grad_norm_after,
                model.backbone.values()
            );
        }
    }
    println!("accepted {accepted}/50, gradient norm grew in {grew}/{accepted}");
    Ok(())
}
