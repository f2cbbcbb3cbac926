//! Every gradient combiner on the same conflicting pair, with the weights and
//! the resulting direction's alignment with each task.
//!
//! Run with `cargo run --release --example combiners_tour`.

use mtl_teleport::combiners::{cagrad_dual, fairgrad_weights, min_norm_weights, Combiner};
use mtl_teleport::conflict::{cos_sim, GradientMatrix};
use mtl_teleport::metrics::stationarity_gap;

fn main() -> mtl_teleport::Result<()> {
    let g = GradientMatrix::from_rows(&[vec![1.0, 0.2], vec![-3.0, 2.0]])?;
    println!("task gradients {:?} and {:?}", &g.row(0)[..], &g.row(1)[..]);
    for c in [Combiner::Ls, Combiner::Pcgrad, Combiner::Cagrad { c: 0.4 }, Combiner::Fairgrad { alpha: 1.0 }] {
        let d = c.combine(&g, 0)?;
        println!(
            "{:<9} direction ({:+.4}, {:+.4})  cos with task 0 {:+.3}, task 1 {:+.3}",
            c.name(),
            d[0],
            d[1],
            cos_sim(&d, g.row(0)),
            cos_sim(&d, g.row(1))
        );
    }
    println!("cagrad weights {:?}", cagrad_dual(&g, 0.4)?.omega);
    println!("fairgrad weights {:?}", fairgrad_weights(&g, 1.0)?);
    println!("min-norm weights {:?}, stationarity gap {:.4}", min_norm_weights(&g)?.omega, stationarity_gap(&g)?);
    Ok(())
}
