//! Synthetic multi-task regression with deliberately imbalanced target scales.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{loss_metrics, TaskSuite};
use crate::diffcore::{Activation, Batch, DenseStack, LossKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::MlpMultiTask;
use crate::rng::{stream_rng, Stream};

/// Shape of a synthetic suite and the model trained on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub d_in: usize,
    pub samples: usize,
    /// Hidden width of the shared teacher.
    pub teacher_width: usize,
    /// Student backbone widths after the input layer.
    pub backbone_widths: Vec<usize>,
    /// Target noise standard deviation, relative to each task's scale.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(tasks: usize, d_in: usize, samples: usize, seed: u64) -> Self {
        Self {
            tasks,
            d_in,
            samples,
            teacher_width: 16,
            backbone_widths: vec![32, 16],
            noise: 0.1,
            seed,
        }
    }
}

/// Target scale of task `i`: `10^(i mod 3)`.
pub fn task_scale(i: usize) -> f64 {
    10f64.powi((i % 3) as i32)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `K` regression tasks on shared Gaussian inputs. Task `i`'s target is
/// `10^(i mod 3) · (cᵢ · tanh(U x / √d) / √h + lᵢ · x / √d)` plus relative
/// noise, with a teacher matrix `U` shared by all tasks and per-task read-outs
/// `cᵢ`, `lᵢ`.
pub fn make_synthetic_multitask(k: usize, d_in: usize, n: usize, seed: u64) -> Result<TaskSuite> {
    make_synthetic_multitask_with(&SyntheticSpec::new(k, d_in, n, seed))
}

pub fn make_synthetic_multitask_with(spec: &SyntheticSpec) -> Result<TaskSuite> {
    let (k, d, n, h) = (spec.tasks, spec.d_in, spec.samples, spec.teacher_width);
    if k < 2 {
        return Err(Error::Precondition(format!("K >= 2 required, got {k}")));
    }
    if n < 10 {
        return Err(Error::Precondition(format!("at least 10 samples required, got {n}")));
    }
    if d == 0 || h == 0 || spec.backbone_widths.is_empty() {
        return Err(Error::Precondition("synthetic widths must be positive".into()));
    }
    let mut rng = stream_rng(spec.seed, Stream::Data, 0);
    let inputs = normal_matrix(n, d, &mut rng);
    let teacher = normal_matrix(h, d, &mut rng);
    let hidden = inputs.matmul_t(&teacher).map(|v| (v / (d as f64).sqrt()).tanh());

    let mut batches = Vec::with_capacity(k);
    for i in 0..k {
        let readout = normal_matrix(h, 1, &mut rng);
        let linear = normal_matrix(d, 1, &mut rng);
        let scale = task_scale(i);
        let clean_nl = hidden.matmul(&readout);
        let clean_lin = inputs.matmul(&linear);
        let targets = Matrix::from_fn(n, 1, |r, _| {
            let clean = clean_nl.get(r, 0) / (h as f64).sqrt() + clean_lin.get(r, 0) / (d as f64).sqrt();
            let eps: f64 = rng.sample(StandardNormal);
            scale * (clean + spec.noise * eps)
        });
        batches.push(Batch::new(inputs.clone(), targets, i)?);
    }

    let mut widths = vec![d];
    widths.extend(&spec.backbone_widths);
    let feature = *widths.last().unwrap_or(&d);
    let backbone = DenseStack::from_widths("bb", &widths, Activation::Tanh, Activation::Tanh);
    let heads = (0..k)
        .map(|i| DenseStack::from_widths(&format!("head{i}_"), &[feature, 1], Activation::Identity, Activation::Identity))
        .collect();
    let program = MlpMultiTask::new(backbone, heads, LossKind::Mse)?;
    let (metric_names, directions) = loss_metrics(k);
    TaskSuite {
        name: format!("synthetic-k{k}"),
        program: Arc::new(program),
        metric_names,
        directions,
        data: Some(batches),
        pareto: None,
    }
    .validate()
}
