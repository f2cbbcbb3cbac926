//! Flat parameter vectors, batches, and a dense reverse-mode tape.
//!
//! Every shared-backbone parameter lives in one flat `ParamVector` whose
//! [`Layout`] records how the flat buffer splits into weight matrices and
//! bias rows. Gradients come back as a [`GradientVector`] with the same
//! layout, which is what the conflict detector and the combiners consume.

mod graph;
pub(crate) mod program;

pub use graph::{Graph, ScalarField, Var};
pub use program::{
    eval_grad, eval_loss, finite_diff_grad, Activation, DenseLayer, DenseStack, LossKind,
    LossProgram, MlpLoss,
};

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// One named block of the flat parameter buffer, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl LayerShape {
    pub fn weight(id: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            id: id.into(),
            rows,
            cols,
            kind: ParamKind::Weight,
        }
    }

    pub fn bias(id: impl Into<String>, cols: usize) -> Self {
        Self {
            id: id.into(),
            rows: 1,
            cols,
            kind: ParamKind::Bias,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<LayerShape>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(entries: Vec<LayerShape>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for e in &entries {
            offsets.push(total);
            total += e.len();
        }
        Self {
            entries,
            offsets,
            total,
        }
    }

    /// Total number of scalars `m`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[LayerShape] {
        &self.entries
    }

    pub fn range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.offsets[layer];
        start..start + self.entries[layer].len()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

/// Flat concatenation of parameter blocks in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape("parameter vector", layout.len(), values.len()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Flattens one matrix per layout entry.
    pub fn from_matrices(layout: Layout, blocks: &[Matrix]) -> Result<Self> {
        if blocks.len() != layout.entries().len() {
            return Err(Error::shape(
                "parameter blocks",
                layout.entries().len(),
                blocks.len(),
            ));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (shape, block) in layout.entries().iter().zip(blocks) {
            if block.shape() != (shape.rows, shape.cols) {
                return Err(Error::shape(
                    shape.id.clone(),
                    format!("{}x{}", shape.rows, shape.cols),
                    format!("{}x{}", block.rows(), block.cols()),
                ));
            }
            values.extend_from_slice(block.data());
        }
        Ok(Self { values, layout })
    }

    pub fn unflatten(&self) -> Vec<Matrix> {
        self.layout
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Matrix::new(e.rows, e.cols, self.values[self.layout.range(i)].to_vec())
                    .expect("layout ranges match shapes")
            })
            .collect()
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        &self.values[self.layout.range(index)]
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut [f64] {
        let r = self.layout.range(index);
        &mut self.values[r]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.values)
    }
}

/// Gradient of a scalar with respect to a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for GradientVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A mini-batch for one task: `n` rows of inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub task: usize,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix, task: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Precondition("batch must contain at least one row".into()));
        }
        if inputs.rows() != targets.rows() {
            return Err(Error::shape("batch targets", inputs.rows(), targets.rows()));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::Precondition("batch contains non-finite entries".into()));
        }
        Ok(Self {
            inputs,
            targets,
            task,
        })
    }

    /// Data-free batch for closed-form objectives that ignore inputs.
    pub fn placeholder(task: usize) -> Self {
        Self {
            inputs: Matrix::zeros(1, 0),
            targets: Matrix::zeros(1, 0),
            task,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select_rows(rows),
            task: self.task,
        }
    }
}
