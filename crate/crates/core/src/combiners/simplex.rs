//! Probability-simplex utilities: Euclidean projection and the min-norm
//! point of the convex hull of task gradients.

use super::{require_tasks, CombinerWeights};
use crate::conflict::GradientMatrix;
use crate::error::Result;

const MIN_NORM_ITERS: usize = 500;
const MIN_NORM_GAP: f64 = 1e-12;

/// Euclidean projection onto `{ω ≥ 0, Σω = 1}` (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

fn quad(gram: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, wi) in w.iter().enumerate() {
        for (j, wj) in w.iter().enumerate() {
            s += wi * gram[i][j] * wj;
        }
    }
    s
}

/// Weights on the simplex minimizing `‖Σ ω_i g_i‖²`, by Frank–Wolfe with
/// away steps and exact line search.
pub fn min_norm_weights(g: &GradientMatrix) -> Result<CombinerWeights> {
    require_tasks(g)?;
    let gram = g.gram();
    let k = gram.len();

    // Start at the vertex with the smallest norm.
    let start = (0..k)
        .min_by(|&a, &b| gram[a][a].total_cmp(&gram[b][b]))
        .expect("K >= 2");
    let mut w = vec![0.0; k];
    w[start] = 1.0;
    // Gw = Gram · w
    let mut gw: Vec<f64> = (0..k).map(|i| gram[i][start]).collect();

    for _ in 0..MIN_NORM_ITERS {
        // Gradient of ωᵀGω is 2·Gω; constants dropped.
        let wgw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let toward = (0..k).min_by(|&a, &b| gw[a].total_cmp(&gw[b])).expect("K >= 2");
        let away = (0..k)
            .filter(|&i| w[i] > 0.0)
            .max_by(|&a, &b| gw[a].total_cmp(&gw[b]))
            .expect("support is nonempty");
        let fw_gap = wgw - gw[toward];
        let away_gap = gw[away] - wgw;
        if fw_gap.max(0.0) <= MIN_NORM_GAP {
            break;
        }

        // Direction d = e_toward − ω (FW) or ω − e_away (away step).
        let (dir, max_step): (Vec<f64>, f64) = if fw_gap >= away_gap {
            let mut d: Vec<f64> = w.iter().map(|x| -x).collect();
            d[toward] += 1.0;
            (d, 1.0)
        } else {
            let mut d = w.clone();
            d[away] -= 1.0;
            let alpha = w[away];
            (d, if alpha < 1.0 { alpha / (1.0 - alpha) } else { f64::INFINITY })
        };
        // f(ω + t d) = f(ω) + 2t dᵀGω + t² dᵀGd
        let slope: f64 = dir.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let curv = quad(&gram, &dir);
        let step = if curv <= 0.0 {
            max_step
        } else {
            (-slope / curv).clamp(0.0, max_step)
        };
        if !(step > 0.0) || !step.is_finite() {
            break;
        }
        for i in 0..k {
            w[i] += step * dir[i];
            if w[i] < 0.0 {
                w[i] = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        gw = (0..k)
            .map(|i| (0..k).map(|j| gram[i][j] * w[j]).sum())
            .collect();
    }
    Ok(CombinerWeights {
        omega: w,
        simplex: true,
    })
}
