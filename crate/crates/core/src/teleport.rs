//! Conflict-triggered teleportation.
//!
//! When the trigger fires, a fresh low-rank adapter is trained on a frozen
//! batch to minimize `L_t − γ · L_g`: `L_t` keeps every task loss near its
//! value at trigger time, and `L_g` rewards points whose balance-weighted loss
//! is large somewhere on a small sphere around them. The adapter is merged
//! only when the final `L_t` is within tolerance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conflict::{ConflictReport, GradientMatrix, TriggerRule};
use crate::diffcore::{Batch, GradientVector};
use crate::error::{Error, Result};
use crate::linalg::{norm, sub};
use crate::models::{attach_lora, merge_lora, AdapterEval, AdapterTerm, LoraAdapter, SharedBackboneModel};
use crate::optimizers::HtrAdamState;
use crate::rng::{derive_seed, stream_rng, Stream};

/// How the sharpness term compares perturbed losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpnessForm {
    /// `max_j |(1/K) Σ R_i L_i(θ + Δθ + ε_j)|`
    #[default]
    WeightedLoss,
    /// `max_j |(1/K) Σ R_i (L_i(θ + Δθ + ε_j) − L_i(θ + Δθ))|`
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleportConfig {
    /// Master switch used by the training harness.
    pub enabled: bool,
    /// Weight of the sharpness term.
    pub gamma: f64,
    /// Number of sphere samples.
    pub n_tilde: usize,
    /// Sphere radius; `None` means `0.01 · (1 + ‖θ‖)`.
    pub delta: Option<f64>,
    pub rank: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Acceptance bound on the final `L_t`; `None` means
    /// `0.01 · (1 + mean |L*|)`. May be `inf` to always merge.
    pub lt_tolerance: Option<f64>,
    /// No teleports before this epoch.
    pub delayed_start_epochs: usize,
    pub max_teleports_per_epoch: usize,
    pub regime_cutoff: usize,
    /// Overrides the many-task threshold `⌈K/2⌉`.
    pub many_task_threshold: Option<usize>,
    pub sharpness: SharpnessForm,
}

impl Default for TeleportConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            gamma: 0.1,
            n_tilde: 8,
            delta: None,
            rank: 5,
            inner_steps: 20,
            inner_lr: 1e-3,
            lt_tolerance: None,
            delayed_start_epochs: 1,
            max_teleports_per_epoch: 5,
            regime_cutoff: 5,
            many_task_threshold: None,
            sharpness: SharpnessForm::WeightedLoss,
        }
    }
}

impl TeleportConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, message: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("teleport.{field}"), message))
            }
        };
        check(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma", "must be finite and >= 0")?;
        check(self.n_tilde >= 1, "n_tilde", "must be >= 1")?;
        check(self.delta.is_none_or(|d| d > 0.0 && d.is_finite()), "delta", "must be finite and > 0")?;
        check(self.rank >= 1, "rank", "must be >= 1")?;
        check(self.inner_steps >= 1, "inner_steps", "must be >= 1")?;
        check(self.inner_lr > 0.0 && self.inner_lr.is_finite(), "inner_lr", "must be finite and > 0")?;
        check(self.lt_tolerance.is_none_or(|t| t > 0.0), "lt_tolerance", "must be > 0")?;
        check(self.max_teleports_per_epoch >= 1, "max_teleports_per_epoch", "must be >= 1")?;
        check(self.regime_cutoff >= 1, "regime_cutoff", "must be >= 1")?;
        check(self.many_task_threshold.is_none_or(|t| t >= 1), "many_task_threshold", "must be >= 1")
    }

    pub fn trigger(&self) -> TriggerRule {
        TriggerRule {
            cutoff: self.regime_cutoff,
            many_task_threshold: self.many_task_threshold,
        }
    }

    pub fn radius(&self, theta: &[f64]) -> f64 {
        self.delta.unwrap_or_else(|| 0.01 * (1.0 + norm(theta)))
    }

    pub fn tolerance(&self, snapshot: &LossSnapshot) -> f64 {
        self.lt_tolerance.unwrap_or_else(|| {
            let mean_abs = snapshot.losses.iter().map(|l| l.abs()).sum::<f64>() / snapshot.losses.len() as f64;
            0.01 * (1.0 + mean_abs)
        })
    }
}

/// Task losses on the frozen teleport batch at trigger time.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSnapshot {
    pub losses: Vec<f64>,
    pub batches: Vec<Batch>,
}

impl LossSnapshot {
    pub fn record(model: &SharedBackboneModel, batches: Vec<Batch>) -> Result<Self> {
        let losses = model.task_losses(&batches)?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                context: "teleport snapshot losses".into(),
            });
        }
        Ok(Self { losses, batches })
    }
}

/// Per-task weights summing to `K`, favouring small-gradient tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceWeights {
    pub r: Vec<f64>,
}

/// `R = K · softmax([Σ_j ‖g_j‖ / ‖g_i‖]_i)`
pub fn balance_weights(g: &GradientMatrix) -> Result<BalanceWeights> {
    let norms = g.norms();
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm { row });
    }
    let total: f64 = norms.iter().sum();
    let logits: Vec<f64> = norms.iter().map(|n| total / n).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let k = norms.len() as f64;
    Ok(BalanceWeights {
        r: exps.iter().map(|e| k * e / z).collect(),
    })
}

/// `(1/K) Σ |L_i − L*_i|`
pub fn loss_fluctuation(current: &[f64], snapshot: &[f64]) -> Result<f64> {
    if current.len() != snapshot.len() || current.is_empty() {
        return Err(Error::shape("loss fluctuation", snapshot.len(), current.len()));
    }
    let sum: f64 = current.iter().zip(snapshot).map(|(c, s)| (c - s).abs()).sum();
    Ok(sum / current.len() as f64)
}

/// Whether to teleport now: past the delayed start, under the per-epoch cap,
/// and the regime's trigger fires.
pub fn should_teleport(report: &ConflictReport, cfg: &TeleportConfig, epoch: usize, teleports_this_epoch: usize) -> bool {
    epoch >= cfg.delayed_start_epochs && teleports_this_epoch < cfg.max_teleports_per_epoch && cfg.trigger().fires(report)
}

/// Number of teleports a recorded report trace would trigger, ignoring any
/// feedback of teleports on later reports.
pub fn replay_trigger_trace(reports: &[ConflictReport], cfg: &TeleportConfig) -> usize {
    let mut count = 0;
    let mut epoch = None;
    let mut this_epoch = 0;
    for r in reports {
        if epoch != Some(r.epoch) {
            epoch = Some(r.epoch);
            this_epoch = 0;
        }
        if should_teleport(r, cfg, r.epoch, this_epoch) {
            this_epoch += 1;
            count += 1;
        }
    }
    count
}

/// `n` points drawn uniformly on the radius-`radius` sphere in `dim`
/// dimensions.
pub fn sphere_samples(dim: usize, n: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::SphereSamples, 0);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&v);
            if len > 0.0 {
                break v.into_iter().map(|x| radius * x / len).collect();
            }
        })
        .collect()
}

fn sharpness_values(eval: &AdapterEval, r: &[f64], form: SharpnessForm) -> Vec<f64> {
    let k = r.len() as f64;
    eval.perturbed
        .iter()
        .map(|row| {
            row.iter()
                .zip(&eval.base)
                .zip(r)
                .map(|((p, b), ri)| match form {
                    SharpnessForm::WeightedLoss => ri * p,
                    SharpnessForm::Difference => ri * (p - b),
                })
                .sum::<f64>()
                / k
        })
        .collect()
}

/// Index and signed value of the largest `|S_j|`; first index on ties.
fn argmax_abs(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if v.abs() > values[best].abs() {
            best = j;
        }
    }
    (best, values[best])
}

/// Sharpness estimate `L_g` at `θ + Δθ` using `n_tilde` sphere samples drawn
/// from `seed`.
pub fn estimate_lg(
    model: &SharedBackboneModel,
    adapter: &LoraAdapter,
    weights: &BalanceWeights,
    snapshot: &LossSnapshot,
    cfg: &TeleportConfig,
    seed: u64,
) -> Result<f64> {
    let radius = cfg.radius(model.backbone.values());
    let eps = sphere_samples(model.backbone.len(), cfg.n_tilde, radius, seed);
    let eval = adapter.evaluate(model, &snapshot.batches, &eps)?;
    Ok(argmax_abs(&sharpness_values(&eval, &weights.r, cfg.sharpness)).1.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeleportOutcome {
    /// Applied backbone displacement; zero when rejected.
    pub delta_theta: Vec<f64>,
    pub lt_final: f64,
    pub lg_initial: f64,
    pub lg_final: f64,
    /// Acceptance bound that was applied.
    pub lt_tolerance: f64,
    /// Task losses at the final inner iterate on the frozen batch.
    pub losses_final: Vec<f64>,
    /// `‖g₀‖` of the mean task gradient before and after.
    pub grad_norm_before: f64,
    pub grad_norm_after: f64,
    /// Mean task gradient at the pre-teleport point.
    pub g_prev: GradientVector,
    pub pairwise_cos_before: Vec<Vec<f64>>,
    pub pairwise_cos_after: Vec<Vec<f64>>,
    pub inner_steps: usize,
    pub accepted: bool,
}

/// Backbone gradient matrix on the given batches.
pub fn backbone_gradients(model: &SharedBackboneModel, batches: &[Batch]) -> Result<GradientMatrix> {
    let grads = model.task_gradients(batches)?;
    GradientMatrix::new(grads.into_iter().map(|g| g.backbone).collect())
}

enum Inner {
    Finished { adapter: LoraAdapter, steps: usize, lg_initial: f64 },
    NonFinite { steps: usize, lg_initial: f64 },
}

fn run_inner_loop(
    model: &SharedBackboneModel,
    snapshot: &LossSnapshot,
    weights: &BalanceWeights,
    eps: &[Vec<f64>],
    cfg: &TeleportConfig,
    seed: u64,
) -> Result<Inner> {
    let k = model.num_tasks();
    let mut adapter = attach_lora(model, cfg.rank, derive_seed(seed, Stream::LoraInit, 0))?;
    let mut params = adapter.params();
    let mut adam = HtrAdamState::new(params.len(), cfg.inner_lr, 0.9, 0.999, 1e-8)?;
    let mut lg_initial = f64::NAN;
    let inv_k = 1.0 / k as f64;
    for step in 0..cfg.inner_steps {
        let result = adapter.objective_gradient(model, &snapshot.batches, eps, |eval| {
            let mut terms = Vec::with_capacity(k * (2 + eps.len()));
            for i in 0..k {
                let dev = eval.base[i] - snapshot.losses[i];
                if dev != 0.0 {
                    terms.push((AdapterTerm::Base(i), inv_k * dev.signum()));
                }
            }
            let (j, s) = argmax_abs(&sharpness_values(eval, &weights.r, cfg.sharpness));
            if cfg.gamma != 0.0 && s != 0.0 {
                let c = -cfg.gamma * s.signum() * inv_k;
                for i in 0..k {
                    terms.push((AdapterTerm::Perturbed { sample: j, task: i }, c * weights.r[i]));
                    if cfg.sharpness == SharpnessForm::Difference {
                        terms.push((AdapterTerm::Base(i), -c * weights.r[i]));
                    }
                }
            }
            terms
        });
        let (eval, grad) = match result {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Ok(Inner::NonFinite { steps: step, lg_initial }),
            Err(e) => return Err(e),
        };
        if step == 0 {
            lg_initial = argmax_abs(&sharpness_values(&eval, &weights.r, cfg.sharpness)).1.abs();
        }
        if eval.base.iter().chain(eval.perturbed.iter().flatten()).any(|v| !v.is_finite()) {
            return Ok(Inner::NonFinite { steps: step, lg_initial });
        }
        if grad.iter().all(|&g| g == 0.0) {
            return Ok(Inner::Finished { adapter, steps: step, lg_initial });
        }
        adam.adam_step(&mut params, &grad)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Ok(Inner::NonFinite { steps: step + 1, lg_initial });
        }
        adapter.set_params(&params)?;
    }
    Ok(Inner::Finished {
        adapter,
        steps: cfg.inner_steps,
        lg_initial,
    })
}

/// Runs one teleport on the frozen snapshot batch. `at_trigger` holds the
/// backbone task gradients on that batch at trigger time; balance weights
/// are computed from it once. The model is modified only when accepted.
pub fn teleport(
    model: &mut SharedBackboneModel,
    snapshot: &LossSnapshot,
    at_trigger: &GradientMatrix,
    cfg: &TeleportConfig,
    seed: u64,
) -> Result<TeleportOutcome> {
    cfg.validate()?;
    let k = model.num_tasks();
    if snapshot.losses.len() != k || snapshot.batches.len() != k || at_trigger.num_tasks() != k {
        return Err(Error::shape("teleport snapshot", k, snapshot.losses.len()));
    }
    let weights = balance_weights(at_trigger)?;
    let radius = cfg.radius(model.backbone.values());
    let eps = sphere_samples(model.backbone.len(), cfg.n_tilde, radius, seed);
    let tolerance = cfg.tolerance(snapshot);
    let g_prev = at_trigger.mean().clone();
    let grad_norm_before = g_prev.norm();
    let cos_before = at_trigger.pairwise_cos();

    let rejected = |steps: usize, lt: f64, lg_initial: f64, lg: f64, losses: Vec<f64>| TeleportOutcome {
        delta_theta: vec![0.0; model.backbone.len()],
        lt_final: lt,
        lg_initial,
        lg_final: lg,
        lt_tolerance: tolerance,
        losses_final: losses,
        grad_norm_before,
        grad_norm_after: grad_norm_before,
        g_prev: g_prev.clone(),
        pairwise_cos_before: cos_before.clone(),
        pairwise_cos_after: cos_before.clone(),
        inner_steps: steps,
        accepted: false,
    };

    let (mut adapter, steps, lg_initial) = match run_inner_loop(model, snapshot, &weights, &eps, cfg, seed)? {
        Inner::Finished { adapter, steps, lg_initial } => (adapter, steps, lg_initial),
        Inner::NonFinite { steps, lg_initial } => {
            return Ok(rejected(steps, f64::NAN, lg_initial, f64::NAN, vec![f64::NAN; k]));
        }
    };
    let eval = match adapter.evaluate(model, &snapshot.batches, &eps) {
        Ok(e) => e,
        Err(Error::NonFinite { .. }) => return Ok(rejected(steps, f64::NAN, lg_initial, f64::NAN, vec![f64::NAN; k])),
        Err(e) => return Err(e),
    };
    let lt = loss_fluctuation(&eval.base, &snapshot.losses)?;
    let lg = argmax_abs(&sharpness_values(&eval, &weights.r, cfg.sharpness)).1.abs();
    let lg_initial = if lg_initial.is_nan() { lg } else { lg_initial };
    if !(lt.is_finite() && lg.is_finite() && lt <= tolerance) {
        return Ok(rejected(steps, lt, lg_initial, lg, eval.base));
    }

    let mut candidate = model.clone();
    let applied = merge_lora(&mut candidate, &mut adapter)?;
    let after = match backbone_gradients(&candidate, &snapshot.batches) {
        Ok(g) => g,
        Err(Error::NonFinite { .. }) => return Ok(rejected(steps, lt, lg_initial, lg, eval.base)),
        Err(e) => return Err(e),
    };
    let delta_theta = sub(candidate.backbone.values(), model.backbone.values());
    debug_assert!(delta_theta.iter().zip(applied.iter()).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs())));
    *model = candidate;
    Ok(TeleportOutcome {
        delta_theta,
        lt_final: lt,
        lg_initial,
        lg_final: lg,
        lt_tolerance: tolerance,
        losses_final: eval.base,
        grad_norm_before,
        grad_norm_after: after.mean().norm(),
        g_prev,
        pairwise_cos_before: cos_before,
        pairwise_cos_after: after.pairwise_cos(),
        inner_steps: steps,
        accepted: true,
    })
}
