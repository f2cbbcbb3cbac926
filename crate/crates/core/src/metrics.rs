//! Relative multi-task degradation, mean rank, and the Pareto-stationarity gap.

use serde::{Deserialize, Serialize};

use crate::combiners::min_norm_weights;
use crate::conflict::GradientMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher",
            Direction::LowerBetter => "lower",
        }
    }
}

/// Per-method metric rows sharing one set of metric names and directions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub metrics: Vec<String>,
    pub directions: Vec<Direction>,
    pub methods: Vec<String>,
    /// `values[method][metric]`
    pub values: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn new(
        metrics: Vec<String>,
        directions: Vec<Direction>,
        methods: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if metrics.len() != directions.len() {
            return Err(Error::shape("metric directions", metrics.len(), directions.len()));
        }
        if methods.len() != values.len() {
            return Err(Error::shape("metric rows", methods.len(), values.len()));
        }
        for (m, row) in methods.iter().zip(&values) {
            if row.len() != metrics.len() {
                return Err(Error::shape(format!("metric row `{m}`"), metrics.len(), row.len()));
            }
            if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("metric `{}` of `{m}`", metrics[k]),
                });
            }
        }
        Ok(Self {
            metrics,
            directions,
            methods,
            values,
        })
    }
}

/// `(1/n) Σ (−1)^{δ_k} (M_m,k − M_b,k) / M_b,k × 100` with `δ_k = 1` for
/// higher-is-better metrics. Negative values mean the method beats the
/// baseline on average.
pub fn delta_m(method: &[f64], baseline: &[f64], directions: &[Direction], names: &[String]) -> Result<f64> {
    let n = baseline.len();
    if method.len() != n || directions.len() != n {
        return Err(Error::shape("delta-m rows", n, method.len().min(directions.len())));
    }
    if n == 0 {
        return Err(Error::Precondition("delta-m needs at least one metric".into()));
    }
    let mut sum = 0.0;
    for k in 0..n {
        if baseline[k] == 0.0 {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
            return Err(Error::Precondition(format!("baseline value of metric `{name}` is zero")));
        }
        let rel = (method[k] - baseline[k]) / baseline[k];
        sum += match directions[k] {
            Direction::LowerBetter => rel,
            Direction::HigherBetter => -rel,
        };
    }
    Ok(sum / n as f64 * 100.0)
}

/// Average rank of each method across metrics (1 = best, ties averaged).
pub fn mean_rank(table: &MetricTable) -> Result<Vec<f64>> {
    let n = table.methods.len();
    if n < 2 {
        return Err(Error::Precondition("mean rank needs at least two methods".into()));
    }
    let mut totals = vec![0.0; n];
    for (k, dir) in table.directions.iter().enumerate() {
        let score = |m: usize| match dir {
            Direction::LowerBetter => table.values[m][k],
            Direction::HigherBetter => -table.values[m][k],
        };
        for m in 0..n {
            let s = score(m);
            let better = (0..n).filter(|&o| score(o) < s).count();
            let tied = (0..n).filter(|&o| score(o) == s).count();
            // Ranks better+1 ..= better+tied share their average.
            totals[m] += better as f64 + (tied as f64 + 1.0) / 2.0;
        }
    }
    let metrics = table.metrics.len().max(1) as f64;
    Ok(totals.into_iter().map(|t| t / metrics).collect())
}

/// `min_{ω ∈ simplex} ‖Σ ω_i g_i‖`
pub fn stationarity_gap(g: &GradientMatrix) -> Result<f64> {
    let w = min_norm_weights(g)?;
    Ok(g.combine(&w.omega).norm())
}
