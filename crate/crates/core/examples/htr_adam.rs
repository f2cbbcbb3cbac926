//! Adam with a one-shot moment modulation after a simulated teleport.
//! Compares the step taken right after the jump for several modulation
//! factors.
//!
//! Run with `cargo run --release --example htr_adam`.

use mtl_teleport::optimizers::{htr_sigma, HtrAdamState};

fn main() -> mtl_teleport::Result<()> {
    // A long run of large gradients builds up a big second moment.
    let history = vec![[40.0, -40.0]; 50];
    let after_jump = [0.5, 0.5];
    for (label, delta) in [("aligned jump", [0.01, 0.01]), ("orthogonal jump", [0.01, -0.01]), ("opposed jump", [-0.01, -0.01])] {
        let sigma = htr_sigma(&delta, &after_jump);
        let mut st = HtrAdamState::new(2, 0.01, 0.9, 0.999, 1e-8)?;
        let mut p = [0.0, 0.0];
        for g in &history {
            st.adam_step(&mut p, g)?;
        }
        let before = p;
        st.arm_htr(sigma)?;
        st.adam_step(&mut p, &after_jump)?;
        println!(
            "{label:<16} sigma {sigma:.3}: step ({:+.5}, {:+.5}), second moment now ({:.3}, {:.3})",
            p[0] - before[0],
            p[1] - before[1],
            st.s[0],
            st.s[1]
        );
    }
    Ok(())
}
