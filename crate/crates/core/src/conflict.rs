//! Gradient similarity and conflict detection.
//!
//! A conflict is *dominated* when the smallest-norm task gradient points away
//! from the mean gradient: the average update then increases the loss of the
//! task that is already lagging. With many tasks the trigger instead counts
//! how many task gradients disagree with the mean.

use serde::{Deserialize, Serialize};

use crate::diffcore::GradientVector;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Norms below this are treated as zero by the similarity conventions.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine similarity, defined as 0 when either vector is (numerically) zero.
pub fn cos_sim(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Stack of per-task gradients with cached mean and norms.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: Vec<GradientVector>,
    mean: GradientVector,
    norms: Vec<f64>,
}

impl GradientMatrix {
    pub fn new(rows: Vec<GradientVector>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Precondition("gradient matrix needs at least one row".into()));
        };
        let m = first.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::shape(format!("gradient row {i}"), m, r.len()));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient row {i}"),
                });
            }
        }
        let k = rows.len() as f64;
        let mut mean = vec![0.0; m];
        for r in &rows {
            for (acc, v) in mean.iter_mut().zip(r.iter()) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= k;
        }
        let norms = rows.iter().map(|r| r.norm()).collect();
        Ok(Self {
            rows,
            mean: mean.into(),
            norms,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().cloned().map(GradientVector::from).collect())
    }

    /// Number of tasks `K`.
    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Length `m` of each row.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rows(&self) -> &[GradientVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &GradientVector {
        &self.rows[i]
    }

    /// `g_0 = (1/K) Σ g_i`
    pub fn mean(&self) -> &GradientVector {
        &self.mean
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// `Gram[i][j] = g_i · g_j`
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let k = self.rows.len();
        let mut gram = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let d = dot(&self.rows[i], &self.rows[j]);
                gram[i][j] = d;
                gram[j][i] = d;
            }
        }
        gram
    }

    /// `Σ ω_i g_i`
    pub fn combine(&self, weights: &[f64]) -> GradientVector {
        let mut out = vec![0.0; self.dim()];
        for (w, r) in weights.iter().zip(&self.rows) {
            for (o, v) in out.iter_mut().zip(r.iter()) {
                *o += w * v;
            }
        }
        out.into()
    }

    /// Matrix of pairwise cosines.
    pub fn pairwise_cos(&self) -> Vec<Vec<f64>> {
        let k = self.rows.len();
        let mut out = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let c = if i == j {
                    if self.norms[i] < ZERO_NORM {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    cos_sim(&self.rows[i], &self.rows[j])
                };
                out[i][j] = c;
                out[j][i] = c;
            }
        }
        out
    }
}

/// Mean of the off-diagonal entries of a cosine matrix.
pub fn mean_pairwise_cos(cos: &[Vec<f64>]) -> f64 {
    let k = cos.len();
    if k < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += cos[i][j];
        }
    }
    sum / (k * (k - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictReport {
    pub pairwise_cos: Vec<Vec<f64>>,
    /// `cos(g_i, g_0)` per task.
    pub mean_cos: Vec<f64>,
    /// `cos(g_i, g_0) < 0` per task.
    pub dominated_flags: Vec<bool>,
    /// Index of the smallest-norm row, lowest index on ties.
    pub min_norm_task: usize,
    /// Few-task trigger: the smallest-norm task disagrees with the mean.
    pub dominated: bool,
    /// Number of tasks disagreeing with the mean.
    pub many_task_count: usize,
    /// The mean gradient vanished; nothing is flagged.
    pub stationary: bool,
    pub epoch: usize,
    pub step: usize,
}

pub fn detect_dominated(g: &GradientMatrix, epoch: usize, step: usize) -> Result<ConflictReport> {
    let k = g.num_tasks();
    if k < 2 {
        return Err(Error::Precondition(format!("K >= 2 required, got {k}")));
    }
    let stationary = g.mean().norm() < ZERO_NORM;
    let mean_cos: Vec<f64> = g.rows().iter().map(|r| cos_sim(r, g.mean())).collect();
    let dominated_flags: Vec<bool> = mean_cos.iter().map(|&c| c < 0.0).collect();
    let mut min_norm_task = 0;
    for (i, &n) in g.norms().iter().enumerate() {
        if n < g.norms()[min_norm_task] {
            min_norm_task = i;
        }
    }
    Ok(ConflictReport {
        pairwise_cos: g.pairwise_cos(),
        dominated: !stationary && dominated_flags[min_norm_task],
        many_task_count: dominated_flags.iter().filter(|&&f| f).count(),
        mean_cos,
        dominated_flags,
        min_norm_task,
        stationary,
        epoch,
        step,
    })
}

/// Default many-task threshold `⌈K/2⌉`.
pub fn many_task_threshold(k: usize) -> usize {
    k.div_ceil(2)
}

/// Many-task trigger with the default `⌈K/2⌉` threshold.
pub fn many_task_trigger(g: &GradientMatrix) -> bool {
    let flagged = g
        .rows()
        .iter()
        .filter(|r| cos_sim(r, g.mean()) < 0.0)
        .count();
    flagged >= many_task_threshold(g.num_tasks())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Smallest-norm task against the mean.
    FewTask,
    /// Count of tasks against the mean.
    ManyTask,
}

/// Trigger rule: which regime applies for a task count, and the many-task
/// threshold (defaults to `⌈K/2⌉`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRule {
    /// Task counts at or above this use the many-task rule.
    pub cutoff: usize,
    pub many_task_threshold: Option<usize>,
}

impl Default for TriggerRule {
    fn default() -> Self {
        Self {
            cutoff: 5,
            many_task_threshold: None,
        }
    }
}

impl TriggerRule {
    pub fn regime(&self, k: usize) -> Regime {
        if k < self.cutoff {
            Regime::FewTask
        } else {
            Regime::ManyTask
        }
    }

    pub fn threshold(&self, k: usize) -> usize {
        self.many_task_threshold.unwrap_or_else(|| many_task_threshold(k))
    }

    pub fn fires(&self, report: &ConflictReport) -> bool {
        let k = report.dominated_flags.len();
        match self.regime(k) {
            Regime::FewTask => report.dominated,
            Regime::ManyTask => !report.stationary && report.many_task_count >= self.threshold(k),
        }
    }
}

/// Fraction of the epoch's steps whose report was dominated.
pub fn conflict_ratio(reports: &[ConflictReport], epoch: usize) -> Result<f64> {
    let in_epoch: Vec<_> = reports.iter().filter(|r| r.epoch == epoch).collect();
    if in_epoch.is_empty() {
        return Err(Error::Precondition(format!("no conflict reports for epoch {epoch}")));
    }
    let hits = in_epoch.iter().filter(|r| r.dominated).count();
    Ok(hits as f64 / in_epoch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gm(rows: &[&[f64]]) -> GradientMatrix {
        GradientMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cos_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cos_sim(&[1.0, 0.0], &[-2.0, 0.0]), -1.0);
        assert!((cos_sim(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(cos_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn dominated_examples() {
        let r = detect_dominated(&gm(&[&[1.0, 0.0], &[-100.0, 0.0]]), 0, 0).unwrap();
        assert_eq!(r.min_norm_task, 0);
        assert!(r.dominated);
        assert_eq!(r.mean_cos[0], -1.0);

        let r = detect_dominated(&gm(&[&[1.0, 0.0], &[0.0, 1.0]]), 0, 0).unwrap();
        assert!(!r.dominated);
        assert!((r.mean_cos[0] - 0.5f64.sqrt()).abs() < 1e-12);

        let r = detect_dominated(&gm(&[&[1.0, 1.0], &[1.0, 1.0]]), 0, 0).unwrap();
        assert!(!r.dominated);
    }

    #[test]
    fn per_row_rescaling_changes_the_flag() {
        // Quadratic pair at the midpoint of a=(0,0), b=(1,0): gradients are
        // 2s_1(θ−a) and 2s_2(θ−b).
        let equal = detect_dominated(&gm(&[&[1.0, 0.0], &[-1.0, 0.0]]), 0, 0).unwrap();
        let skewed = detect_dominated(&gm(&[&[1.0, 0.0], &[-100.0, 0.0]]), 0, 0).unwrap();
        assert!(equal.stationary && !equal.dominated);
        assert!(skewed.dominated);
    }

    #[test]
    fn min_norm_tie_takes_lowest_index() {
        let r = detect_dominated(&gm(&[&[0.0, 2.0], &[1.0, 0.0], &[-1.0, 0.0]]), 0, 0).unwrap();
        assert_eq!(r.min_norm_task, 1);
    }

    #[test]
    fn ceiling_threshold_cases() {
        // K=3, two rows against the mean
        assert!(many_task_trigger(&gm(&[&[-1.0, 0.0], &[-1.0, 0.1], &[10.0, 0.0]])));
        // K=3, one row against the mean
        assert!(!many_task_trigger(&gm(&[&[-1.0, 0.0], &[1.0, 0.1], &[10.0, 0.0]])));
        assert_eq!(many_task_threshold(40), 20);
        assert_eq!(many_task_threshold(3), 2);
    }

    #[test]
    fn ratio_counts_dominated_steps() {
        let yes = detect_dominated(&gm(&[&[1.0, 0.0], &[-100.0, 0.0]]), 2, 0).unwrap();
        let no = detect_dominated(&gm(&[&[1.0, 0.0], &[0.0, 1.0]]), 2, 1).unwrap();
        let reports = vec![yes.clone(), yes.clone(), yes, no];
        assert_eq!(conflict_ratio(&reports, 2).unwrap(), 0.75);
        assert!(conflict_ratio(&reports, 0).is_err());
    }

    #[test]
    fn regime_switches_at_cutoff() {
        let rule = TriggerRule::default();
        assert_eq!(rule.regime(4), Regime::FewTask);
        assert_eq!(rule.regime(5), Regime::ManyTask);
    }

    proptest! {
        #[test]
        fn cosine_scale_invariance(
            a in proptest::collection::vec(-10.0f64..10.0, 5),
            b in proptest::collection::vec(-10.0f64..10.0, 5),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let base = cos_sim(&a, &b);
            let scaled: Vec<f64> = a.iter().map(|v| c * v).collect();
            let flipped: Vec<f64> = a.iter().map(|v| -c * v).collect();
            prop_assert!((cos_sim(&scaled, &b) - base).abs() < 1e-12);
            prop_assert!((cos_sim(&flipped, &b) + base).abs() < 1e-12);
        }

        #[test]
        fn cached_mean_and_norms(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 2..6)) {
            let g = GradientMatrix::from_rows(&rows).unwrap();
            for j in 0..4 {
                let m: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((g.mean()[j] - m).abs() < 1e-12);
            }
            for (r, n) in rows.iter().zip(g.norms()) {
                prop_assert!((norm(r) - n).abs() < 1e-12);
            }
            let report = detect_dominated(&g, 0, 0).unwrap();
            if report.dominated {
                prop_assert!(report.dominated_flags[report.min_norm_task]);
            }
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    prop_assert_eq!(report.pairwise_cos[i][j], report.pairwise_cos[j][i]);
                }
            }
        }
    }
}
