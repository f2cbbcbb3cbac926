//! Loss programs: scalar objectives over a flat parameter vector.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::{Batch, GradientVector, LayerShape, Layout, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A differentiable scalar objective whose parameters follow a fixed layout.
pub trait LossProgram: Send + Sync {
    fn layout(&self) -> Layout;

    /// Records the loss on `graph`. `params` holds one leaf per layout entry.
    fn build(&self, graph: &mut Graph, params: &[Var], batch: &Batch) -> Result<Var>;
}

fn check_layout(program: &dyn LossProgram, params: &ParamVector) -> Result<()> {
    let expected = program.layout();
    if params.layout() == &expected {
        return Ok(());
    }
    for (want, got) in expected.entries().iter().zip(params.layout().entries()) {
        if want != got {
            return Err(Error::shape(
                want.id.clone(),
                format!("{}x{}", want.rows, want.cols),
                format!("{} {}x{}", got.id, got.rows, got.cols),
            ));
        }
    }
    Err(Error::shape(
        "parameter layout",
        format!("{} layers", expected.entries().len()),
        format!("{} layers", params.layout().entries().len()),
    ))
}

/// Places every layout block on the graph as a leaf.
pub(crate) fn leaves(graph: &mut Graph, params: &ParamVector) -> Vec<Var> {
    params
        .unflatten()
        .into_iter()
        .map(|m| graph.leaf(m))
        .collect()
}

/// Concatenates leaf adjoints in layout order.
pub(crate) fn flatten_adjoints(adj: &super::graph::Adjoints, vars: &[Var]) -> Vec<f64> {
    let mut out = Vec::new();
    for &v in vars {
        out.extend_from_slice(adj.wrt(v).data());
    }
    out
}

pub fn eval_loss(program: &dyn LossProgram, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_layout(program, params)?;
    let mut graph = Graph::new();
    let vars = leaves(&mut graph, params);
    let loss = program.build(&mut graph, &vars, batch)?;
    Ok(graph.scalar(loss))
}

pub fn eval_grad(
    program: &dyn LossProgram,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    check_layout(program, params)?;
    let mut graph = Graph::new();
    let vars = leaves(&mut graph, params);
    let loss = program.build(&mut graph, &vars, batch)?;
    let adj = graph.backward(loss)?;
    let grad = flatten_adjoints(&adj, &vars);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient".into(),
        });
    }
    Ok((graph.scalar(loss), GradientVector::new(grad)))
}

/// Central differences, one coordinate at a time.
pub fn finite_diff_grad(
    program: &dyn LossProgram,
    params: &ParamVector,
    batch: &Batch,
    eps: f64,
) -> Result<GradientVector> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let up = eval_loss(program, &probe, batch)?;
        probe.values_mut()[i] = orig - eps;
        let down = eval_loss(program, &probe, batch)?;
        probe.values_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(GradientVector::new(grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, graph: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => graph.relu(x),
            Activation::Tanh => graph.tanh(x),
        }
    }
}

/// `y = act(x · Wᵀ + b)` with `W` stored `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

/// A chain of dense layers. Each layer owns two layout entries,
/// `<name>.weight` then `<name>.bias`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
}

impl DenseStack {
    /// Builds layers `prefix0, prefix1, …` through the given widths; hidden
    /// layers use `hidden`, the last one `output`.
    pub fn from_widths(prefix: &str, widths: &[usize], hidden: Activation, output: Activation) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| DenseLayer {
                name: format!("{prefix}{i}"),
                n_in: widths[i],
                n_out: widths[i + 1],
                activation: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(|l| l.n_in)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(|l| l.n_out)
    }

    pub fn layout_entries(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    LayerShape::weight(format!("{}.weight", l.name), l.n_out, l.n_in),
                    LayerShape::bias(format!("{}.bias", l.name), l.n_out),
                ]
            })
            .collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.layout_entries())
    }

    /// `params` holds two vars per layer in layout order.
    pub fn forward(&self, graph: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::shape("dense stack parameters", 2 * self.layers.len(), params.len()));
        }
        let mut x = input;
        for (layer, p) in self.layers.iter().zip(params.chunks(2)) {
            let in_width = graph.value(x).cols();
            if in_width != layer.n_in {
                return Err(Error::shape(layer.name.clone(), layer.n_in, in_width));
            }
            let z = graph.matmul_t(x, p[0])?;
            let z = graph.add_bias(z, p[1])?;
            x = layer.activation.apply(graph, z);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn apply(self, graph: &mut Graph, output: Var, targets: &Matrix) -> Result<Var> {
        match self {
            LossKind::Mse => graph.mse(output, targets),
            LossKind::SoftmaxCrossEntropy => graph.softmax_cross_entropy(output, targets),
        }
    }
}

/// Single-network supervised loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLoss {
    pub stack: DenseStack,
    pub loss: LossKind,
}

impl LossProgram for MlpLoss {
    fn layout(&self) -> Layout {
        self.stack.layout()
    }

    fn build(&self, graph: &mut Graph, params: &[Var], batch: &Batch) -> Result<Var> {
        let x = graph.leaf(batch.inputs.clone());
        let out = self.stack.forward(graph, params, x)?;
        self.loss.apply(graph, out, &batch.targets)
    }
}
