//! Shared-backbone multi-task models and low-rank adapters over the backbone.

mod checkpoint;
mod lora;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use lora::{attach_lora, merge_lora, AdapterEval, AdapterTerm, LoraAdapter, LoraPair, LORA_INIT_STD};

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::diffcore::program::{flatten_adjoints, leaves};
use crate::diffcore::{
    Batch, DenseStack, GradientVector, Graph, Layout, LossKind, ParamKind, ParamVector, Var,
};
use crate::error::{Error, Result};

/// K task losses over one shared parameter block plus per-task heads.
pub trait MultiTaskProgram: Send + Sync + fmt::Debug {
    fn num_tasks(&self) -> usize;

    fn backbone_layout(&self) -> Layout;

    fn head_layout(&self, task: usize) -> Layout;

    /// Records `L_task` given backbone and head leaves (one var per layout entry).
    fn task_loss(
        &self,
        graph: &mut Graph,
        backbone: &[Var],
        head: &[Var],
        task: usize,
        batch: &Batch,
    ) -> Result<Var>;
}

/// MLP backbone feeding K independent MLP heads.
#[derive(Debug, Clone)]
pub struct MlpMultiTask {
    pub backbone: DenseStack,
    pub heads: Vec<DenseStack>,
    pub loss: LossKind,
}

impl MlpMultiTask {
    pub fn new(backbone: DenseStack, heads: Vec<DenseStack>, loss: LossKind) -> Result<Self> {
        if heads.len() < 2 {
            return Err(Error::Precondition(format!(
                "K >= 2 required, got {} heads",
                heads.len()
            )));
        }
        let width = backbone
            .output_width()
            .ok_or_else(|| Error::Precondition("backbone has no layers".into()))?;
        for (i, h) in heads.iter().enumerate() {
            match h.input_width() {
                Some(w) if w == width => {}
                Some(w) => return Err(Error::shape(format!("head{i}"), width, w)),
                None => return Err(Error::Precondition(format!("head {i} has no layers"))),
            }
        }
        Ok(Self {
            backbone,
            heads,
            loss,
        })
    }
}

impl MultiTaskProgram for MlpMultiTask {
    fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    fn backbone_layout(&self) -> Layout {
        self.backbone.layout()
    }

    fn head_layout(&self, task: usize) -> Layout {
        self.heads[task].layout()
    }

    fn task_loss(
        &self,
        graph: &mut Graph,
        backbone: &[Var],
        head: &[Var],
        task: usize,
        batch: &Batch,
    ) -> Result<Var> {
        let x = graph.leaf(batch.inputs.clone());
        let features = self.backbone.forward(graph, backbone, x)?;
        let out = self.heads[task].forward(graph, head, features)?;
        self.loss.apply(graph, out, &batch.targets)
    }
}

/// Loss value plus gradients for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    pub loss: f64,
    pub backbone: GradientVector,
    pub head: GradientVector,
}

#[derive(Clone)]
pub struct SharedBackboneModel {
    program: Arc<dyn MultiTaskProgram>,
    pub backbone: ParamVector,
    pub heads: Vec<ParamVector>,
}

impl fmt::Debug for SharedBackboneModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedBackboneModel")
            .field("program", &self.program)
            .field("backbone_len", &self.backbone.len())
            .field("heads", &self.heads.len())
            .finish()
    }
}

impl SharedBackboneModel {
    pub fn new(
        program: Arc<dyn MultiTaskProgram>,
        backbone: ParamVector,
        heads: Vec<ParamVector>,
    ) -> Result<Self> {
        let k = program.num_tasks();
        if k < 2 {
            return Err(Error::Precondition(format!("K >= 2 required, got {k}")));
        }
        if heads.len() != k {
            return Err(Error::shape("heads", k, heads.len()));
        }
        if backbone.layout() != &program.backbone_layout() {
            return Err(Error::shape(
                "backbone",
                program.backbone_layout().len(),
                backbone.len(),
            ));
        }
        for (i, h) in heads.iter().enumerate() {
            if h.layout() != &program.head_layout(i) {
                return Err(Error::shape(format!("head{i}"), program.head_layout(i).len(), h.len()));
            }
        }
        Ok(Self {
            program,
            backbone,
            heads,
        })
    }

    /// Weights ~ N(0, 1/n_in), biases zero.
    pub fn init(program: Arc<dyn MultiTaskProgram>, rng: &mut impl Rng) -> Result<Self> {
        let backbone = init_params(program.backbone_layout(), rng);
        let heads = (0..program.num_tasks())
            .map(|i| init_params(program.head_layout(i), rng))
            .collect();
        Self::new(program, backbone, heads)
    }

    pub fn program(&self) -> &Arc<dyn MultiTaskProgram> {
        &self.program
    }

    pub fn num_tasks(&self) -> usize {
        self.program.num_tasks()
    }

    fn check_task(&self, task: usize, batch: &Batch) -> Result<()> {
        if task >= self.num_tasks() {
            return Err(Error::Precondition(format!(
                "task index {task} out of range for K={}",
                self.num_tasks()
            )));
        }
        if batch.task != task {
            return Err(Error::Precondition(format!(
                "batch belongs to task {}, evaluated as task {task}",
                batch.task
            )));
        }
        Ok(())
    }

    /// `L_task` at the backbone, or at backbone + adapter delta when given.
    pub fn forward_task_loss(
        &self,
        adapter: Option<&LoraAdapter>,
        task: usize,
        batch: &Batch,
    ) -> Result<f64> {
        self.check_task(task, batch)?;
        let mut graph = Graph::new();
        let backbone = match adapter {
            Some(a) => {
                let (eff, _) = lora::effective_backbone(&mut graph, self, a, None)?;
                eff
            }
            None => leaves(&mut graph, &self.backbone),
        };
        let head = leaves(&mut graph, &self.heads[task]);
        let loss = self.program.task_loss(&mut graph, &backbone, &head, task, batch)?;
        Ok(graph.scalar(loss))
    }

    pub fn task_losses(&self, batches: &[Batch]) -> Result<Vec<f64>> {
        batches
            .iter()
            .enumerate()
            .map(|(i, b)| self.forward_task_loss(None, i, b))
            .collect()
    }

    pub fn task_gradient(&self, task: usize, batch: &Batch) -> Result<TaskGradient> {
        self.check_task(task, batch)?;
        let mut graph = Graph::new();
        let backbone = leaves(&mut graph, &self.backbone);
        let head = leaves(&mut graph, &self.heads[task]);
        let loss = self.program.task_loss(&mut graph, &backbone, &head, task, batch)?;
        let adj = graph.backward(loss)?;
        let gb = flatten_adjoints(&adj, &backbone);
        let gh = flatten_adjoints(&adj, &head);
        if gb.iter().chain(&gh).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("task {task} gradient"),
            });
        }
        Ok(TaskGradient {
            loss: graph.scalar(loss),
            backbone: gb.into(),
            head: gh.into(),
        })
    }

    /// Gradients for every task, one batch per task. Tasks are evaluated in
    /// parallel; results are returned in task order.
    pub fn task_gradients(&self, batches: &[Batch]) -> Result<Vec<TaskGradient>> {
        if batches.len() != self.num_tasks() {
            return Err(Error::shape("task batches", self.num_tasks(), batches.len()));
        }
        batches
            .par_iter()
            .enumerate()
            .map(|(i, b)| self.task_gradient(i, b))
            .collect()
    }
}

fn init_params(layout: Layout, rng: &mut impl Rng) -> ParamVector {
    let mut p = ParamVector::zeros(layout.clone());
    for (i, e) in layout.entries().iter().enumerate() {
        if e.kind == ParamKind::Weight {
            let std = 1.0 / (e.cols.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in p.layer_mut(i) {
                *v = normal.sample(rng);
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use crate::linalg::Matrix;
    use crate::rng::seeded;

    pub(crate) fn small_model(seed: u64) -> (SharedBackboneModel, Vec<Batch>) {
        let program = MlpMultiTask::new(
            DenseStack::from_widths("bb", &[3, 6, 4], Activation::Tanh, Activation::Tanh),
            (0..3)
                .map(|i| DenseStack::from_widths(&format!("h{i}."), &[4, 2], Activation::Identity, Activation::Identity))
                .collect(),
            LossKind::Mse,
        )
        .unwrap();
        let mut rng = seeded(seed);
        let model = SharedBackboneModel::init(Arc::new(program), &mut rng).unwrap();
        let batches = (0..3)
            .map(|t| {
                let x = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c + t) as f64 * 0.37).sin());
                let y = Matrix::from_fn(5, 2, |r, c| ((r + 2 * c + t) as f64 * 0.71).cos());
                Batch::new(x, y, t).unwrap()
            })
            .collect();
        (model, batches)
    }

    #[test]
    fn rejects_mismatched_head_width() {
        let err = MlpMultiTask::new(
            DenseStack::from_widths("bb", &[3, 4], Activation::Tanh, Activation::Tanh),
            vec![
                DenseStack::from_widths("h0.", &[4, 1], Activation::Identity, Activation::Identity),
                DenseStack::from_widths("h1.", &[5, 1], Activation::Identity, Activation::Identity),
            ],
            LossKind::Mse,
        )
        .unwrap_err();
        assert!(err.to_string().contains("head1"));
    }

    #[test]
    fn task_index_out_of_range() {
        let (model, batches) = small_model(1);
        let mut b = batches[0].clone();
        b.task = 3;
        assert!(matches!(
            model.forward_task_loss(None, 3, &b),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn task_gradient_matches_finite_differences() {
        let (mut model, batches) = small_model(2);
        let g = model.task_gradient(1, &batches[1]).unwrap();
        let eps = 1e-6;
        for i in 0..model.backbone.len() {
            let orig = model.backbone.values()[i];
            model.backbone.values_mut()[i] = orig + eps;
            let up = model.forward_task_loss(None, 1, &batches[1]).unwrap();
            model.backbone.values_mut()[i] = orig - eps;
            let down = model.forward_task_loss(None, 1, &batches[1]).unwrap();
            model.backbone.values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - g.backbone[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", g.backbone[i]);
        }
    }
}
