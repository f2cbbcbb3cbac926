//! The training loop: per step, compute task gradients, check for conflict,
//! and either teleport or combine the gradients and step the optimizer.

use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use super::config::{OptimizerKind, RunConfig, SuiteConfig};
use crate::conflict::{detect_dominated, GradientMatrix};
use crate::diffcore::Batch;
use crate::error::{Error, Result};
use crate::metrics::{delta_m, stationarity_gap, Direction};
use crate::models::SharedBackboneModel;
use crate::optimizers::{htr_sigma, HtrAdamState, Sgd};
use crate::problems::TaskSuite;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::teleport::{should_teleport, teleport, LossSnapshot, TeleportOutcome};

/// One training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    /// Task losses on the step's batch, before the update.
    pub losses: Vec<f64>,
    /// The regime's trigger condition held at this step.
    pub dominated: bool,
    /// Tasks whose gradient has negative cosine with the mean gradient.
    pub trigger_count: usize,
    pub teleport_id: Option<usize>,
    /// `‖g₀‖` of the mean backbone gradient.
    pub grad_norm: f64,
    pub stat_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeleportRow {
    pub id: usize,
    pub epoch: usize,
    pub step: usize,
    /// HTR modulation armed after an accepted teleport.
    pub sigma: Option<f64>,
    pub outcome: TeleportOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub metric: String,
    pub direction: Direction,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub method: String,
    pub steps: Vec<StepRow>,
    pub teleports: Vec<TeleportRow>,
    pub metrics: Vec<MetricRow>,
    /// Single-task reference value per task metric, when requested.
    pub baseline: Option<Vec<f64>>,
    pub delta_m: Option<f64>,
    pub final_stat_gap: f64,
    pub final_backbone: Vec<f64>,
    pub wall_time_secs: f64,
    /// Set when the run aborted; the record then holds the rows so far.
    pub error: Option<String>,
}

/// A run that aborted, with everything recorded up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: Box<RunRecord>,
    pub error: Error,
}

/// Called after every step with the row, the updated model and the step's
/// batches (the frozen teleport batch on teleport steps).
pub type StepObserver<'a> = dyn FnMut(&StepRow, &SharedBackboneModel, &[Batch]) + 'a;

enum Updater {
    Sgd(Sgd),
    Adam(HtrAdamState),
}

impl Updater {
    fn new(cfg: &RunConfig, len: usize) -> Result<Self> {
        let o = &cfg.optimizer;
        Ok(match o.name {
            OptimizerKind::Sgd => {
                let lr = match (o.lr, o.smoothness) {
                    (Some(lr), _) => lr,
                    (None, Some(s)) => Sgd::horizon_step_size(s, cfg.training.total_steps())?,
                    (None, None) => return Err(Error::config("optimizer.lr", "sgd needs `lr` or `smoothness`")),
                };
                Updater::Sgd(Sgd { lr })
            }
            OptimizerKind::Adam => {
                let lr = o.lr.ok_or_else(|| Error::config("optimizer.lr", "required for adam"))?;
                Updater::Adam(HtrAdamState::new(len, lr, o.beta1, o.beta2, o.eps)?)
            }
        })
    }

    fn halve_lr(&mut self) {
        match self {
            Updater::Sgd(s) => s.lr *= 0.5,
            Updater::Adam(a) => a.lr *= 0.5,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            Updater::Sgd(s) => s.step(params, grad),
            Updater::Adam(a) => a.adam_step(params, grad),
        }
    }

    fn arm(&mut self, sigma: f64) -> Result<()> {
        match self {
            Updater::Sgd(_) => Ok(()),
            Updater::Adam(a) => a.arm_htr(sigma),
        }
    }
}

/// Train/test split of a suite's data; closed-form suites use placeholders.
struct Data {
    train: Option<Vec<Batch>>,
    test: Option<Vec<Batch>>,
}

impl Data {
    fn split(suite: &TaskSuite, fraction: Option<f64>) -> Result<Self> {
        let Some(full) = &suite.data else {
            return Ok(Data { train: None, test: None });
        };
        let f = fraction.unwrap_or(0.0);
        let mut train = Vec::with_capacity(full.len());
        let mut test = Vec::with_capacity(full.len());
        for b in full {
            let n = b.len();
            let n_test = (n as f64 * f).floor() as usize;
            if n_test == 0 {
                train.push(b.clone());
                test.push(b.clone());
                continue;
            }
            if n_test >= n {
                return Err(Error::Precondition(format!("task {} has no training rows after the split", b.task)));
            }
            train.push(b.select(&(0..n - n_test).collect::<Vec<_>>()));
            test.push(b.select(&(n - n_test..n).collect::<Vec<_>>()));
        }
        Ok(Data {
            train: Some(train),
            test: Some(test),
        })
    }

    fn sample(&self, suite: &TaskSuite, batch_size: usize, rng: &mut impl Rng) -> Vec<Batch> {
        match &self.train {
            None => suite.placeholder_batches(),
            Some(train) => train
                .iter()
                .map(|b| {
                    let m = batch_size.min(b.len());
                    let idx = index::sample(rng, b.len(), m).into_vec();
                    b.select(&idx)
                })
                .collect(),
        }
    }

    fn train_all(&self, suite: &TaskSuite) -> Vec<Batch> {
        self.train.clone().unwrap_or_else(|| suite.placeholder_batches())
    }

    fn test_all(&self, suite: &TaskSuite) -> Vec<Batch> {
        self.test.clone().unwrap_or_else(|| suite.placeholder_batches())
    }
}

fn initial_model(cfg: &RunConfig, suite: &TaskSuite) -> Result<SharedBackboneModel> {
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
    match &cfg.suite {
        SuiteConfig::Ravine { init } => suite.model_at(init),
        SuiteConfig::Quadratic { init, .. } => {
            let p = init.unwrap_or_else(|| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            suite.model_at(&p)
        }
        _ => suite.init_model(&mut rng),
    }
}

/// Seed for PCGrad's shuffle at a global step.
pub fn combiner_seed(root: u64, global_step: usize) -> u64 {
    derive_seed(root, Stream::PcGradShuffle, global_step as u64)
}

/// Seed for the teleport with the given id.
pub fn teleport_seed(root: u64, id: usize) -> u64 {
    derive_seed(root, Stream::SphereSamples, id as u64)
}

/// What the loop optimizes.
#[derive(Clone, Copy)]
enum Objective {
    MultiTask,
    SingleTask(usize),
}

struct Trained {
    model: SharedBackboneModel,
    steps: Vec<StepRow>,
    teleports: Vec<TeleportRow>,
}

fn train(
    cfg: &RunConfig,
    suite: &TaskSuite,
    data: &Data,
    objective: Objective,
    observer: &mut StepObserver<'_>,
    out: &mut Trained,
) -> Result<()> {
    let k = suite.num_tasks();
    let mut backbone_opt = Updater::new(cfg, out.model.backbone.len())?;
    let head_len: usize = out.model.heads.iter().map(|h| h.len()).sum();
    let mut head_opt = Updater::new(cfg, head_len)?;
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batches, 0);
    let tele = &cfg.teleport;
    let multi = matches!(objective, Objective::MultiTask);
    let mut just_teleported = false;

    for epoch in 0..cfg.training.epochs {
        if cfg.optimizer.halve_at_epoch == Some(epoch) && epoch > 0 {
            backbone_opt.halve_lr();
            head_opt.halve_lr();
        }
        let mut this_epoch = 0;
        for step in 0..cfg.training.steps_per_epoch {
            let global = epoch * cfg.training.steps_per_epoch + step;
            let mut batches = data.sample(suite, cfg.training.batch_size, &mut batch_rng);
            let model = &mut out.model;

            if let Objective::SingleTask(task) = objective {
                let g = model.task_gradient(task, &batches[task])?;
                backbone_opt.step(model.backbone.values_mut(), &g.backbone)?;
                let mut head_grad = vec![0.0; head_len];
                let offset: usize = model.heads[..task].iter().map(|h| h.len()).sum();
                head_grad[offset..offset + g.head.len()].copy_from_slice(&g.head);
                step_heads(model, &mut head_opt, &head_grad)?;
                continue;
            }

            let grads = model.task_gradients(&batches)?;
            let losses: Vec<f64> = grads.iter().map(|g| g.loss).collect();
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("task losses at epoch {epoch} step {step}"),
                });
            }
            let head_grad: Vec<f64> = grads.iter().flat_map(|g| g.head.iter().map(|v| v / k as f64)).collect();
            let g = GradientMatrix::new(grads.into_iter().map(|g| g.backbone).collect())?;
            let report = detect_dominated(&g, epoch, step)?;
            let mut row = StepRow {
                epoch,
                step,
                losses,
                dominated: tele.trigger().fires(&report),
                trigger_count: report.many_task_count,
                teleport_id: None,
                grad_norm: g.mean().norm(),
                stat_gap: stationarity_gap(&g)?,
            };
            let seed = combiner_seed(cfg.seed, global);

            if multi && tele.enabled && !just_teleported && should_teleport(&report, tele, epoch, this_epoch) {
                this_epoch += 1;
                let id = out.teleports.len();
                let direction = cfg.method.combine(&g, seed)?;
                let snapshot = LossSnapshot::record(model, std::mem::take(&mut batches))?;
                let outcome = teleport(model, &snapshot, &g, tele, teleport_seed(cfg.seed, id))?;
                row.teleport_id = Some(id);
                if outcome.accepted {
                    let sigma = htr_sigma(&outcome.delta_theta, &direction);
                    if cfg.optimizer.htr {
                        backbone_opt.arm(sigma)?;
                    }
                    out.teleports.push(TeleportRow {
                        id,
                        epoch,
                        step,
                        sigma: Some(sigma),
                        outcome,
                    });
                    just_teleported = true;
                    observer(&row, model, &snapshot.batches);
                    out.steps.push(row);
                    continue;
                }
                out.teleports.push(TeleportRow {
                    id,
                    epoch,
                    step,
                    sigma: None,
                    outcome,
                });
                backbone_opt.step(model.backbone.values_mut(), &direction)?;
                batches = snapshot.batches;
            } else {
                let direction = cfg.method.combine(&g, seed)?;
                backbone_opt.step(model.backbone.values_mut(), &direction)?;
            }
            just_teleported = false;
            step_heads(model, &mut head_opt, &head_grad)?;
            if model.backbone.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("backbone after epoch {epoch} step {step}"),
                });
            }
            observer(&row, model, &batches);
            out.steps.push(row);
        }
    }
    Ok(())
}

fn step_heads(model: &mut SharedBackboneModel, opt: &mut Updater, grad: &[f64]) -> Result<()> {
    if grad.is_empty() {
        return Ok(());
    }
    let mut flat: Vec<f64> = model.heads.iter().flat_map(|h| h.values().iter().copied()).collect();
    opt.step(&mut flat, grad)?;
    let mut offset = 0;
    for h in &mut model.heads {
        let n = h.len();
        h.values_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

fn backbone_gap(model: &SharedBackboneModel, batches: &[Batch]) -> Result<f64> {
    let grads = model.task_gradients(batches)?;
    stationarity_gap(&GradientMatrix::new(grads.into_iter().map(|g| g.backbone).collect())?)
}

/// Single-task reference metric for each task.
fn single_task_baselines(cfg: &RunConfig, suite: &TaskSuite, data: &Data) -> Result<Vec<f64>> {
    let test = data.test_all(suite);
    (0..suite.num_tasks())
        .into_par_iter()
        .map(|task| {
            let mut out = Trained {
                model: initial_model(cfg, suite)?,
                steps: Vec::new(),
                teleports: Vec::new(),
            };
            train(cfg, suite, data, Objective::SingleTask(task), &mut |_, _, _| {}, &mut out)?;
            out.model.forward_task_loss(None, task, &test[task])
        })
        .collect()
}

pub fn run_experiment(cfg: &RunConfig) -> std::result::Result<RunRecord, RunFailure> {
    run_experiment_with(cfg, None, &mut |_, _, _| {})
}

/// Runs one experiment. Relative CSV paths resolve against `base_dir`.
pub fn run_experiment_with(
    cfg: &RunConfig,
    base_dir: Option<&Path>,
    observer: &mut StepObserver<'_>,
) -> std::result::Result<RunRecord, RunFailure> {
    let start = Instant::now();
    let mut record = RunRecord {
        config: cfg.clone(),
        method: cfg.method_label(),
        steps: Vec::new(),
        teleports: Vec::new(),
        metrics: Vec::new(),
        baseline: None,
        delta_m: None,
        final_stat_gap: f64::NAN,
        final_backbone: Vec::new(),
        wall_time_secs: 0.0,
        error: None,
    };
    let fail = |mut record: RunRecord, error: Error| {
        record.error = Some(error.to_string());
        record.wall_time_secs = start.elapsed().as_secs_f64();
        RunFailure {
            partial: Box::new(record),
            error,
        }
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(record, e));
    }
    let setup = (|| {
        let suite = cfg.suite.build(cfg.seed, base_dir)?;
        let data = Data::split(&suite, cfg.suite.test_fraction())?;
        let model = initial_model(cfg, &suite)?;
        Ok::<_, Error>((suite, data, model))
    })();
    let (suite, data, model) = match setup {
        Ok(v) => v,
        Err(e) => return Err(fail(record, e)),
    };
    let mut trained = Trained {
        model,
        steps: Vec::new(),
        teleports: Vec::new(),
    };
    let result = train(cfg, &suite, &data, Objective::MultiTask, observer, &mut trained);
    record.steps = std::mem::take(&mut trained.steps);
    record.teleports = std::mem::take(&mut trained.teleports);
    record.final_backbone = trained.model.backbone.values().to_vec();
    if let Err(e) = result {
        return Err(fail(record, e));
    }

    let finish = (|| {
        let final_gap = backbone_gap(&trained.model, &data.train_all(&suite))?;
        let test = data.test_all(&suite);
        let values = trained.model.task_losses(&test)?;
        let baseline = if cfg.baseline.single_task {
            Some(single_task_baselines(cfg, &suite, &data)?)
        } else {
            None
        };
        let dm = match &baseline {
            Some(b) => Some(delta_m(&values, b, &suite.directions, &suite.metric_names)?),
            None => None,
        };
        Ok::<_, Error>((final_gap, values, baseline, dm))
    })();
    let (final_gap, values, baseline, dm) = match finish {
        Ok(v) => v,
        Err(e) => return Err(fail(record, e)),
    };
    let label = record.method.clone();
    for ((name, dir), v) in suite.metric_names.iter().zip(&suite.directions).zip(&values) {
        record.metrics.push(MetricRow {
            method: label.clone(),
            metric: name.clone(),
            direction: *dir,
            value: *v,
        });
    }
    record.metrics.push(MetricRow {
        method: label.clone(),
        metric: "stat_gap".into(),
        direction: Direction::LowerBetter,
        value: final_gap,
    });
    if let Some(d) = dm {
        record.metrics.push(MetricRow {
            method: label,
            metric: "delta_m".into(),
            direction: Direction::LowerBetter,
            value: d,
        });
    }
    record.final_stat_gap = final_gap;
    record.baseline = baseline;
    record.delta_m = dm;
    record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(extra: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            r#"
seed = 5
[suite]
kind = "synthetic"
tasks = 3
d_in = 4
samples = 60
[optimizer]
name = "adam"
lr = 0.01
[training]
epochs = 2
steps_per_epoch = 10
batch_size = 8
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn row_count_matches_schedule() {
        let rec = run_experiment(&config("")).unwrap();
        assert_eq!(rec.steps.len(), 20);
        assert!(rec.teleports.is_empty());
        assert_eq!(rec.metrics.len(), 4);
    }

    #[test]
    fn teleport_ids_reference_rows() {
        let rec = run_experiment(&config("[teleport]\nenabled = true\nrank = 2\ndelayed_start_epochs = 0\n")).unwrap();
        let ids: Vec<usize> = rec.steps.iter().filter_map(|r| r.teleport_id).collect();
        assert_eq!(ids, (0..rec.teleports.len()).collect::<Vec<_>>());
    }

    #[test]
    fn baseline_produces_delta_m() {
        let rec = run_experiment(&config("[baseline]\nsingle_task = true\n")).unwrap();
        assert!(rec.delta_m.unwrap().is_finite());
        assert_eq!(rec.baseline.unwrap().len(), 3);
    }

    #[test]
    fn missing_csv_is_a_runtime_failure() {
        let cfg = RunConfig::from_toml(
            r#"
seed = 1
[suite]
kind = "csv"
path = "/nonexistent.csv"
d_in = 2
d_out = 1
[optimizer]
name = "sgd"
lr = 0.1
[training]
epochs = 1
steps_per_epoch = 1
"#,
        )
        .unwrap();
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.partial.error.is_some());
        assert!(matches!(err.error, Error::Io { .. }));
    }
}
