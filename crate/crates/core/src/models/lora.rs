//! Low-rank adapters on backbone weight matrices.
//!
//! The effective weight of an adapted layer is `W + scaling · B·A`. The graph
//! records that sum with the same floating-point operations that
//! [`merge_lora`] performs, so a merged model evaluates bit-identically to the
//! adapted one.

use rand_distr::{Distribution, Normal};

use super::SharedBackboneModel;
use crate::diffcore::program::{flatten_adjoints, leaves};
use crate::diffcore::{Batch, GradientVector, Graph, Layout, ParamKind, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::seeded;

pub const LORA_INIT_STD: f64 = 0.02;

/// Adapter for one backbone weight matrix of shape `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// Index of the weight entry in the backbone layout.
    pub layer: usize,
    /// `rank × n_in`
    pub a: Matrix,
    /// `n_out × rank`
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scaling: f64,
    pub pairs: Vec<LoraPair>,
    merged: bool,
    layout: Layout,
}

/// Creates an adapter on every backbone weight matrix with `A ~ N(0, 0.02²)`
/// and `B = 0`, so the adapted model starts exactly at the current weights.
pub fn attach_lora(model: &SharedBackboneModel, rank: usize, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::Precondition("adapter rank must be at least 1".into()));
    }
    let layout = model.backbone.layout();
    let mut rng = seeded(seed);
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("finite std");
    let mut pairs = Vec::new();
    for (i, e) in layout.entries().iter().enumerate() {
        if e.kind != ParamKind::Weight {
            continue;
        }
        if rank > e.rows.min(e.cols) {
            return Err(Error::Precondition(format!(
                "adapter rank {rank} exceeds min dimension {} of layer `{}` ({}x{})",
                e.rows.min(e.cols),
                e.id,
                e.rows,
                e.cols
            )));
        }
        let a = Matrix::from_fn(rank, e.cols, |_, _| normal.sample(&mut rng));
        pairs.push(LoraPair {
            layer: i,
            a,
            b: Matrix::zeros(e.rows, rank),
        });
    }
    Ok(LoraAdapter {
        rank,
        scaling: 1.0,
        pairs,
        merged: false,
        layout: layout.clone(),
    })
}

/// Adds the adapter delta into the backbone and returns the flat delta.
/// The adapter cannot be merged again afterwards.
pub fn merge_lora(model: &mut SharedBackboneModel, adapter: &mut LoraAdapter) -> Result<GradientVector> {
    if adapter.merged {
        return Err(Error::Usage("adapter has already been merged".into()));
    }
    adapter.check_compatible(model)?;
    let delta = adapter.delta();
    for pair in &adapter.pairs {
        let ba = pair.b.matmul(&pair.a);
        for (w, d) in model.backbone.layer_mut(pair.layer).iter_mut().zip(ba.data()) {
            *w += adapter.scaling * d;
        }
    }
    adapter.merged = true;
    Ok(delta)
}

/// Which task loss a gradient term refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterTerm {
    /// `L_task(θ + Δθ)`
    Base(usize),
    /// `L_task(θ + Δθ + ε_sample)`
    Perturbed { sample: usize, task: usize },
}

/// Task losses at the adapted point and at each perturbation of it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEval {
    pub base: Vec<f64>,
    /// `perturbed[j][i]` is task `i` at perturbation `j`.
    pub perturbed: Vec<Vec<f64>>,
}

impl LoraAdapter {
    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn num_params(&self) -> usize {
        self.pairs.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Adapter parameters flattened as `A₀, B₀, A₁, B₁, …`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.pairs {
            out.extend_from_slice(p.a.data());
            out.extend_from_slice(p.b.data());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape("adapter parameters", self.num_params(), values.len()));
        }
        let mut offset = 0;
        for p in &mut self.pairs {
            let n = p.a.len();
            p.a.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
            let n = p.b.len();
            p.b.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flat `Δθ` aligned with the backbone layout; zero at biases.
    pub fn delta(&self) -> GradientVector {
        let mut out = vec![0.0; self.layout.len()];
        for p in &self.pairs {
            let ba = p.b.matmul(&p.a);
            for (o, d) in out[self.layout.range(p.layer)].iter_mut().zip(ba.data()) {
                *o = self.scaling * d;
            }
        }
        out.into()
    }

    /// Backbone layout the adapter was attached to.
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(super) fn from_parts(rank: usize, scaling: f64, pairs: Vec<LoraPair>, layout: Layout) -> Self {
        Self {
            rank,
            scaling,
            pairs,
            merged: false,
            layout,
        }
    }

    fn check_compatible(&self, model: &SharedBackboneModel) -> Result<()> {
        let layout = model.backbone.layout();
        if layout != &self.layout {
            return Err(Error::shape("adapter backbone", self.layout.len(), layout.len()));
        }
        for p in &self.pairs {
            let e = layout
                .entries()
                .get(p.layer)
                .ok_or_else(|| Error::shape("adapter layer index", layout.entries().len(), p.layer))?;
            if p.b.rows() != e.rows || p.a.cols() != e.cols || p.a.rows() != self.rank {
                return Err(Error::shape(
                    e.id.clone(),
                    format!("{}x{}", e.rows, e.cols),
                    format!("B {}x{} · A {}x{}", p.b.rows(), p.b.cols(), p.a.rows(), p.a.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Forward-only evaluation of every task at `θ + Δθ` and at
    /// `θ + Δθ + ε_j` for each perturbation.
    pub fn evaluate(
        &self,
        model: &SharedBackboneModel,
        batches: &[Batch],
        perturbations: &[Vec<f64>],
    ) -> Result<AdapterEval> {
        self.objective_gradient(model, batches, perturbations, |_| Vec::new())
            .map(|(eval, _)| eval)
    }

    /// Evaluates all task losses, then differentiates `Σ coeff · term` with
    /// respect to the adapter parameters, where the terms are chosen by
    /// `weights` after seeing the loss values. Backbone and heads stay frozen.
    pub fn objective_gradient(
        &self,
        model: &SharedBackboneModel,
        batches: &[Batch],
        perturbations: &[Vec<f64>],
        weights: impl FnOnce(&AdapterEval) -> Vec<(AdapterTerm, f64)>,
    ) -> Result<(AdapterEval, Vec<f64>)> {
        self.check_compatible(model)?;
        let k = model.num_tasks();
        if batches.len() != k {
            return Err(Error::shape("task batches", k, batches.len()));
        }
        let program = model.program().clone();
        let mut graph = Graph::new();
        let (adapter_vars, products) = record_products(&mut graph, self)?;
        let heads: Vec<Vec<Var>> = model.heads.iter().map(|h| leaves(&mut graph, h)).collect();

        let task_nodes = |graph: &mut Graph, offset: Option<&[f64]>| -> Result<Vec<Var>> {
            let backbone = effective_weights(graph, model, self, &products, offset)?;
            (0..k)
                .map(|i| program.task_loss(graph, &backbone, &heads[i], i, &batches[i]))
                .collect()
        };
        let base = task_nodes(&mut graph, None)?;
        let mut perturbed = Vec::with_capacity(perturbations.len());
        for eps in perturbations {
            if eps.len() != model.backbone.len() {
                return Err(Error::shape("perturbation", model.backbone.len(), eps.len()));
            }
            perturbed.push(task_nodes(&mut graph, Some(eps))?);
        }
        let eval = AdapterEval {
            base: base.iter().map(|&v| graph.scalar(v)).collect(),
            perturbed: perturbed
                .iter()
                .map(|row| row.iter().map(|&v| graph.scalar(v)).collect())
                .collect(),
        };

        let terms: Vec<(f64, Var)> = weights(&eval)
            .into_iter()
            .filter(|&(_, c)| c != 0.0)
            .map(|(term, c)| {
                let node = match term {
                    AdapterTerm::Base(i) => base.get(i),
                    AdapterTerm::Perturbed { sample, task } => {
                        perturbed.get(sample).and_then(|row| row.get(task))
                    }
                };
                node.map(|&v| (c, v))
                    .ok_or_else(|| Error::Precondition(format!("unknown adapter term {term:?}")))
            })
            .collect::<Result<_>>()?;
        if terms.is_empty() {
            return Ok((eval, vec![0.0; self.num_params()]));
        }
        let objective = graph.affine(&terms)?;
        let adj = graph.backward(objective)?;
        let grad = flatten_adjoints(&adj, &adapter_vars);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "adapter gradient".into(),
            });
        }
        Ok((eval, grad))
    }
}

/// Places `A`, `B` leaves and the `B·A` products on the graph.
fn record_products(graph: &mut Graph, adapter: &LoraAdapter) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut vars = Vec::with_capacity(2 * adapter.pairs.len());
    let mut products = Vec::with_capacity(adapter.pairs.len());
    for p in &adapter.pairs {
        let a = graph.leaf(p.a.clone());
        let b = graph.leaf(p.b.clone());
        products.push(graph.matmul(b, a)?);
        vars.push(a);
        vars.push(b);
    }
    Ok((vars, products))
}

/// Backbone vars for `θ (+ offset) + scaling · B·A`.
fn effective_weights(
    graph: &mut Graph,
    model: &SharedBackboneModel,
    adapter: &LoraAdapter,
    products: &[Var],
    offset: Option<&[f64]>,
) -> Result<Vec<Var>> {
    let layout = model.backbone.layout();
    let mut out = Vec::with_capacity(layout.entries().len());
    for (i, block) in model.backbone.unflatten().into_iter().enumerate() {
        let block = match offset {
            Some(eps) => {
                let r = layout.range(i);
                let mut shifted = block;
                for (w, e) in shifted.data_mut().iter_mut().zip(&eps[r]) {
                    *w += e;
                }
                shifted
            }
            None => block,
        };
        let leaf = graph.leaf(block);
        let var = match adapter.pairs.iter().position(|p| p.layer == i) {
            Some(j) => graph.affine(&[(1.0, leaf), (adapter.scaling, products[j])])?,
            None => leaf,
        };
        out.push(var);
    }
    Ok(out)
}

/// Effective backbone vars plus adapter leaves, used by single-task forwards.
pub(super) fn effective_backbone(
    graph: &mut Graph,
    model: &SharedBackboneModel,
    adapter: &LoraAdapter,
    offset: Option<&[f64]>,
) -> Result<(Vec<Var>, Vec<Var>)> {
    adapter.check_compatible(model)?;
    let (vars, products) = record_products(graph, adapter)?;
    let eff = effective_weights(graph, model, adapter, &products, offset)?;
    Ok((eff, vars))
}
