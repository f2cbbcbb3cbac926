//! Conflict-averse direction: the update within radius `c‖g_0‖` of the mean
//! gradient that maximizes the worst task's improvement.
//!
//! Solved through its dual over simplex weights `ω`:
//! `F(ω) = g_ω·g_0 + c‖g_0‖·‖g_ω‖`, `g_ω = Σ ω_i g_i`.

use super::{project_to_simplex, require_tasks};
use crate::conflict::GradientMatrix;
use crate::diffcore::GradientVector;
use crate::error::{Error, Result};
use crate::linalg::axpy;

const ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct CagradSolution {
    pub omega: Vec<f64>,
    pub objective: f64,
}

struct Dual {
    gram: Vec<Vec<f64>>,
    /// `Gram · 1/K`, so that `g_ω·g_0 = ωᵀ mean_dots`.
    mean_dots: Vec<f64>,
    radius: f64,
}

impl Dual {
    fn new(g: &GradientMatrix, c: f64) -> Self {
        let gram = g.gram();
        let k = gram.len() as f64;
        let mean_dots = gram.iter().map(|row| row.iter().sum::<f64>() / k).collect();
        Self {
            gram,
            mean_dots,
            radius: c * g.mean().norm(),
        }
    }

    fn gram_times(&self, w: &[f64]) -> Vec<f64> {
        self.gram
            .iter()
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let gw = self.gram_times(w);
        let sq: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let lin: f64 = w.iter().zip(&self.mean_dots).map(|(a, b)| a * b).sum();
        lin + self.radius * sq.max(0.0).sqrt()
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let gw = self.gram_times(w);
        let sq: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let n = sq.max(0.0).sqrt();
        self.mean_dots
            .iter()
            .zip(&gw)
            .map(|(m, g)| if n > 0.0 { m + self.radius * g / n } else { *m })
            .collect()
    }

    /// Gershgorin bound on the spectral radius of the Gram matrix.
    fn lipschitz(&self) -> f64 {
        self.gram
            .iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// The dual objective `F(ω)` at arbitrary simplex weights.
pub fn cagrad_objective(g: &GradientMatrix, c: f64, omega: &[f64]) -> f64 {
    Dual::new(g, c).value(omega)
}

/// Minimizes the dual by projected gradient descent on the simplex, starting
/// at uniform weights with step `0.5/L`. The step is halved whenever it fails
/// to decrease the objective, and the best iterate seen is returned.
pub fn cagrad_dual(g: &GradientMatrix, c: f64) -> Result<CagradSolution> {
    require_tasks(g)?;
    if !(c >= 0.0) {
        return Err(Error::Precondition(format!("CAGrad radius c must be >= 0, got {c}")));
    }
    let dual = Dual::new(g, c);
    let k = g.num_tasks();
    let mut w = vec![1.0 / k as f64; k];
    let mut f = dual.value(&w);
    let lipschitz = dual.lipschitz();
    if lipschitz == 0.0 {
        return Ok(CagradSolution { omega: w, objective: f });
    }
    let mut step = 0.5 / lipschitz;
    for _ in 0..ITERATIONS {
        let grad = dual.gradient(&w);
        let mut accepted = false;
        while step > 1e-20 / lipschitz {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(a, b)| a - step * b).collect();
            let trial = project_to_simplex(&trial);
            let ft = dual.value(&trial);
            if ft < f {
                w = trial;
                f = ft;
                accepted = true;
                // Let the step grow back toward the nominal size.
                step = (step * 2.0).min(0.5 / lipschitz * 64.0);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(CagradSolution {
        omega: w,
        objective: f,
    })
}

/// `d = g_0 + (c‖g_0‖ / ‖g_ω*‖) · g_ω*`, or `g_0` when `g_ω*` vanishes.
pub fn combine_cagrad(g: &GradientMatrix, c: f64) -> Result<GradientVector> {
    require_tasks(g)?;
    if !(c >= 0.0) {
        return Err(Error::Precondition(format!("CAGrad radius c must be >= 0, got {c}")));
    }
    if c == 0.0 {
        return Ok(g.mean().clone());
    }
    let sol = cagrad_dual(g, c)?;
    let gw = g.combine(&sol.omega);
    let n = gw.norm();
    let mut d = g.mean().to_vec();
    if n > 0.0 {
        axpy(c * g.mean().norm() / n, &gw, &mut d);
    }
    Ok(d.into())
}
