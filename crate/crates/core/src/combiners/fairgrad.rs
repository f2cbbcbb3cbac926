//! Fair-utility weighting: find `ω > 0` with `Gram · ω = ω^(−1/α)`
//! elementwise, then step along `Σ ω_i g_i`.
//!
//! The system is solved in log coordinates `ω = exp(u)` by damped Newton
//! iterations with backtracking on the squared residual. The Jacobian
//! `Gram · diag(ω) + (1/α) · diag(ω^(−1/α))` is always nonsingular because the
//! Gram matrix is positive semidefinite.

use super::require_tasks;
use crate::conflict::GradientMatrix;
use crate::diffcore::GradientVector;
use crate::error::{Error, Result};
use crate::linalg::solve;

/// Target ∞-norm of `Gram · ω − ω^(−1/α)`.
pub const FAIRGRAD_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 5000;

fn residual(gram: &[Vec<f64>], alpha: f64, u: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = u.iter().map(|x| x.exp()).collect();
    gram.iter()
        .zip(u)
        .map(|(row, ui)| {
            let gw: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            gw - (-ui / alpha).exp()
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// ∞-norm residual of the weight equation at `omega`.
pub fn fairgrad_residual(g: &GradientMatrix, alpha: f64, omega: &[f64]) -> f64 {
    let u: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
    inf_norm(&residual(&g.gram(), alpha, &u))
}

pub fn fairgrad_weights(g: &GradientMatrix, alpha: f64) -> Result<Vec<f64>> {
    require_tasks(g)?;
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!("alpha must be positive, got {alpha}")));
    }
    if let Some(row) = g.norms().iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm { row });
    }
    let gram = g.gram();
    let k = gram.len();
    let mut u = vec![0.0; k];
    let mut r = residual(&gram, alpha, &u);
    let mut merit = sq_norm(&r);
    for _ in 0..MAX_ITERS {
        if inf_norm(&r) <= FAIRGRAD_TOL {
            return Ok(u.iter().map(|x| x.exp()).collect());
        }
        let w: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let jac: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let mut v = gram[i][j] * w[j];
                        if i == j {
                            v += (-u[i] / alpha).exp() / alpha;
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let Some(step) = solve(jac, rhs) else {
            break;
        };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            let rt = residual(&gram, alpha, &trial);
            let mt = sq_norm(&rt);
            if mt.is_finite() && mt < merit {
                u = trial;
                r = rt;
                merit = mt;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let res = inf_norm(&r);
    if res <= FAIRGRAD_TOL {
        return Ok(u.iter().map(|x| x.exp()).collect());
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERS,
        residual: res,
    })
}

pub fn combine_fairgrad(g: &GradientMatrix, alpha: f64) -> Result<GradientVector> {
    let w = fairgrad_weights(g, alpha)?;
    Ok(g.combine(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    /// Root of an increasing function on a log-spaced bracket by bisection in
    /// log space.
    fn log_bisect(f: impl Fn(f64) -> f64) -> f64 {
        let grid: Vec<f64> = (-600..=600).map(|i| 10f64.powf(i as f64 / 50.0)).collect();
        let mut lo = grid[0];
        let mut hi = *grid.last().unwrap();
        for pair in grid.windows(2) {
            if f(pair[0]) <= 0.0 && f(pair[1]) > 0.0 {
                lo = pair[0];
                hi = pair[1];
                break;
            }
        }
        for _ in 0..200 {
            let mid = (lo.ln() + hi.ln()).mul_add(0.5, 0.0).exp();
            if f(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo.ln() * 0.5 + hi.ln() * 0.5).exp()
    }

    /// Two-task oracle: for each ω₁ the second equation pins down ω₂, then
    /// bisect the first equation in ω₁.
    fn oracle(gram: [[f64; 2]; 2], alpha: f64) -> [f64; 2] {
        let w2_of = |w1: f64| log_bisect(|w2| gram[1][0] * w1 + gram[1][1] * w2 - w2.powf(-1.0 / alpha));
        let w1 = log_bisect(|w1| gram[0][0] * w1 + gram[0][1] * w2_of(w1) - w1.powf(-1.0 / alpha));
        [w1, w2_of(w1)]
    }

    #[test]
    fn duplicated_unit_row() {
        let g = GradientMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let w = fairgrad_weights(&g, 1.0).unwrap();
        let expected = 0.5f64.sqrt();
        assert!((w[0] - expected).abs() < 1e-9 && (w[1] - expected).abs() < 1e-9);
        assert!(fairgrad_residual(&g, 1.0, &w) < 1e-8);
    }

    #[test]
    fn symmetric_rows_get_equal_weights() {
        let g = GradientMatrix::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0]]).unwrap();
        for alpha in [0.5, 1.0, 2.0, 5.0] {
            let w = fairgrad_weights(&g, alpha).unwrap();
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_bisection_oracle() {
        let mut rng = seeded(23);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let alpha = rng.random_range(0.5..3.0);
            let g = GradientMatrix::from_rows(&rows).unwrap();
            let gram = g.gram();
            let w = fairgrad_weights(&g, alpha).unwrap();
            let o = oracle([[gram[0][0], gram[0][1]], [gram[1][0], gram[1][1]]], alpha);
            assert!(fairgrad_residual(&g, alpha, &w) <= 1e-8);
            for i in 0..2 {
                assert!((w[i] - o[i]).abs() <= 1e-5, "{w:?} vs {o:?}");
            }
        }
    }

    #[test]
    fn zero_row_rejected() {
        let g = GradientMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(fairgrad_weights(&g, 1.0), Err(Error::ZeroNorm { row: 1 })));
    }

    #[test]
    fn imbalanced_many_task_instance_converges() {
        let mut rng = seeded(2);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let s = 10f64.powi((i % 3) as i32);
                (0..20).map(|_| s * rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let g = GradientMatrix::from_rows(&rows).unwrap();
        let w = fairgrad_weights(&g, 1.0).unwrap();
        assert!(fairgrad_residual(&g, 1.0, &w) <= 1e-8);
    }
}
