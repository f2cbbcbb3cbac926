//! Task suites: closed-form two-task landscapes, synthetic regression tasks,
//! and CSV ingestion.

mod csv;
mod synthetic;
mod toy;

pub use self::csv::{load_csv_dataset, CsvSchema};
pub use synthetic::{make_synthetic_multitask, make_synthetic_multitask_with, SyntheticSpec};
pub use toy::{
    make_quadratic_pair, make_ravine_toy, FieldTasks, QuadraticBowl, RavineTask, SoftplusRamp,
    Valley, RAVINE_INITS,
};

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{Batch, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sub};
use crate::metrics::Direction;
use crate::models::{MultiTaskProgram, SharedBackboneModel};

/// Closed-form membership test for a suite's Pareto set.
#[derive(Debug, Clone, PartialEq)]
pub enum ParetoOracle {
    /// Segment between two points, within an absolute distance.
    Segment { a: Vec<f64>, b: Vec<f64>, tol: f64 },
}

impl ParetoOracle {
    pub fn distance(&self, theta: &[f64]) -> f64 {
        match self {
            ParetoOracle::Segment { a, b, .. } => {
                let ab = sub(b, a);
                let at = sub(theta, a);
                let t = (dot(&at, &ab) / dot(&ab, &ab)).clamp(0.0, 1.0);
                let foot: Vec<f64> = a.iter().zip(&ab).map(|(x, d)| x + t * d).collect();
                norm(&sub(theta, &foot))
            }
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match self {
            ParetoOracle::Segment { tol, .. } => self.distance(theta) <= *tol,
        }
    }
}

#[derive(Clone)]
pub struct TaskSuite {
    pub name: String,
    pub program: Arc<dyn MultiTaskProgram>,
    /// One reported metric per task.
    pub metric_names: Vec<String>,
    pub directions: Vec<Direction>,
    /// Full dataset per task, when the tasks are data-driven.
    pub data: Option<Vec<Batch>>,
    pub pareto: Option<ParetoOracle>,
}

impl fmt::Debug for TaskSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskSuite")
            .field("name", &self.name)
            .field("tasks", &self.num_tasks())
            .field("data", &self.data.as_ref().map(|d| d.iter().map(Batch::len).collect::<Vec<_>>()))
            .field("pareto", &self.pareto)
            .finish()
    }
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.program.num_tasks()
    }

    /// Randomly initialized model (weights ~ N(0, 1/fan_in), zero biases).
    pub fn init_model(&self, rng: &mut impl Rng) -> Result<SharedBackboneModel> {
        SharedBackboneModel::init(self.program.clone(), rng)
    }

    /// Model with the backbone set to `theta`; heads are zero-initialized.
    pub fn model_at(&self, theta: &[f64]) -> Result<SharedBackboneModel> {
        let backbone = ParamVector::new(self.program.backbone_layout(), theta.to_vec())?;
        let heads = (0..self.num_tasks())
            .map(|i| ParamVector::zeros(self.program.head_layout(i)))
            .collect();
        SharedBackboneModel::new(self.program.clone(), backbone, heads)
    }

    /// One data-free batch per task, for closed-form suites.
    pub fn placeholder_batches(&self) -> Vec<Batch> {
        (0..self.num_tasks()).map(Batch::placeholder).collect()
    }

    pub(crate) fn validate(self) -> Result<Self> {
        let k = self.num_tasks();
        if k < 2 {
            return Err(Error::Precondition(format!("K >= 2 required, got {k}")));
        }
        if self.metric_names.len() != k || self.directions.len() != k {
            return Err(Error::shape("suite metrics", k, self.metric_names.len()));
        }
        if let Some(data) = &self.data {
            if data.len() != k {
                return Err(Error::shape("suite datasets", k, data.len()));
            }
        }
        Ok(self)
    }
}

/// Per-task loss metrics named `loss_<i>`, lower is better.
pub(crate) fn loss_metrics(k: usize) -> (Vec<String>, Vec<Direction>) {
    (
        (0..k).map(|i| format!("loss_{i}")).collect(),
        vec![Direction::LowerBetter; k],
    )
}
