//! Closed-form two-parameter landscapes.

use std::sync::Arc;

use super::{loss_metrics, ParetoOracle, TaskSuite};
use crate::diffcore::{Batch, Graph, LayerShape, Layout, ScalarField, Var};
use crate::error::{Error, Result};
use crate::models::MultiTaskProgram;

/// Tasks given directly as scalar fields of the backbone vector `theta`.
/// Heads are empty.
#[derive(Debug, Clone)]
pub struct FieldTasks {
    pub dim: usize,
    pub fields: Vec<Arc<dyn ScalarField>>,
}

impl MultiTaskProgram for FieldTasks {
    fn num_tasks(&self) -> usize {
        self.fields.len()
    }

    fn backbone_layout(&self) -> Layout {
        Layout::new(vec![LayerShape::weight("theta", 1, self.dim)])
    }

    fn head_layout(&self, _task: usize) -> Layout {
        Layout::default()
    }

    fn task_loss(
        &self,
        graph: &mut Graph,
        backbone: &[Var],
        _head: &[Var],
        task: usize,
        _batch: &Batch,
    ) -> Result<Var> {
        graph.field(backbone[0], self.fields[task].as_ref())
    }
}

/// `scale · ‖θ − center‖²`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBowl {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl ScalarField for QuadraticBowl {
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(x.len());
        for (xi, ci) in x.iter().zip(&self.center) {
            let d = xi - ci;
            value += d * d;
            grad.push(2.0 * self.scale * d);
        }
        (self.scale * value, grad)
    }
}

/// Two quadratic bowls `s₁‖θ − a‖²` and `s₂‖θ − b‖²`; the Pareto set is the
/// segment `[a, b]`.
pub fn make_quadratic_pair(a: [f64; 2], b: [f64; 2], scale: (f64, f64)) -> Result<TaskSuite> {
    if a == b {
        return Err(Error::Degenerate("quadratic pair needs distinct centers".into()));
    }
    if !(scale.0 > 0.0 && scale.1 > 0.0) {
        return Err(Error::Precondition(format!(
            "quadratic scales must be positive, got {scale:?}"
        )));
    }
    let fields: Vec<Arc<dyn ScalarField>> = vec![
        Arc::new(QuadraticBowl {
            center: a.to_vec(),
            scale: scale.0,
        }),
        Arc::new(QuadraticBowl {
            center: b.to_vec(),
            scale: scale.1,
        }),
    ];
    let (metric_names, directions) = loss_metrics(2);
    TaskSuite {
        name: "quadratic".into(),
        program: Arc::new(FieldTasks { dim: 2, fields }),
        metric_names,
        directions,
        data: None,
        pareto: Some(ParetoOracle::Segment {
            a: a.to_vec(),
            b: b.to_vec(),
            tol: 1e-9,
        }),
    }
    .validate()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `scale · softplus(weight · θ + bias)`: flat on one side of a line,
/// a constant slope of `scale · ‖weight‖` on the other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftplusRamp {
    pub weight: [f64; 2],
    pub bias: f64,
    pub scale: f64,
}

/// `depth · (1 − exp(−‖θ − center‖² / (2 width²)))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Valley {
    pub center: [f64; 2],
    pub depth: f64,
    pub width: f64,
}

/// Sum of soft-plus ramps plus one Gaussian valley. Nonnegative and smooth.
#[derive(Debug, Clone, PartialEq)]
pub struct RavineTask {
    pub ramps: Vec<SoftplusRamp>,
    pub valley: Valley,
}

impl ScalarField for RavineTask {
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; 2];
        for r in &self.ramps {
            let z = r.weight[0] * x[0] + r.weight[1] * x[1] + r.bias;
            value += r.scale * softplus(z);
            let s = r.scale * sigmoid(z);
            grad[0] += s * r.weight[0];
            grad[1] += s * r.weight[1];
        }
        let v = &self.valley;
        let dx = x[0] - v.center[0];
        let dy = x[1] - v.center[1];
        let w2 = v.width * v.width;
        let e = (-(dx * dx + dy * dy) / (2.0 * w2)).exp();
        value += v.depth * (1.0 - e);
        grad[0] += v.depth * e * dx / w2;
        grad[1] += v.depth * e * dy / w2;
        (value, grad)
    }
}

/// Starting points on the cliff face of the ravine landscape.
pub const RAVINE_INITS: [[f64; 2]; 5] = [[0.5, 7.0], [1.5, 6.0], [-0.5, 8.0], [2.5, 5.0], [-1.0, 8.5]];

/// The two ravine tasks.
///
/// Both tasks share a valley floor near the origin, task 0 centred at
/// `(-1, 0)` and task 1 at `(1, 0)`. Above `y ≈ 1.5` task 1 rises along a
/// plateau slope that dominates task 0's gentle opposing tilt, and beyond the
/// line `x + y = 7` task 1 climbs a steep cliff.
pub fn ravine_tasks() -> [RavineTask; 2] {
    [
        RavineTask {
            ramps: vec![
                SoftplusRamp {
                    weight: [1.0, 0.0],
                    bias: 4.0,
                    scale: 0.3,
                },
                SoftplusRamp {
                    weight: [0.0, -1.0],
                    bias: 6.0,
                    scale: 0.1,
                },
            ],
            valley: Valley {
                center: [-1.0, 0.0],
                depth: 3.0,
                width: 1.0,
            },
        },
        RavineTask {
            ramps: vec![
                SoftplusRamp {
                    weight: [-0.3, 3.0],
                    bias: -4.5,
                    scale: 1.0,
                },
                SoftplusRamp {
                    weight: [200.0, 200.0],
                    bias: -1400.0,
                    scale: 1.0,
                },
            ],
            valley: Valley {
                center: [1.0, 0.0],
                depth: 3.0,
                width: 1.0,
            },
        },
    ]
}

/// Two-task ravine landscape; see [`ravine_tasks`] for the shape and
/// [`RAVINE_INITS`] for the documented starting points.
pub fn make_ravine_toy() -> Result<TaskSuite> {
    let fields: Vec<Arc<dyn ScalarField>> = ravine_tasks()
        .into_iter()
        .map(|t| Arc::new(t) as Arc<dyn ScalarField>)
        .collect();
    let (metric_names, directions) = loss_metrics(2);
    TaskSuite {
        name: "ravine".into(),
        program: Arc::new(FieldTasks { dim: 2, fields }),
        metric_names,
        directions,
        data: None,
        pareto: None,
    }
    .validate()
}
