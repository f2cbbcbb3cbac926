//! Turning the task-gradient matrix into one update direction.

mod cagrad;
mod fairgrad;
mod pcgrad;
mod simplex;

pub use cagrad::{cagrad_dual, cagrad_objective, combine_cagrad, CagradSolution};
pub use fairgrad::{combine_fairgrad, fairgrad_residual, fairgrad_weights, FAIRGRAD_TOL};
pub use pcgrad::{combine_pcgrad, pcgrad_surgery, PcGradSurgery};
pub use simplex::{min_norm_weights, project_to_simplex};

use serde::{Deserialize, Serialize};

use crate::conflict::GradientMatrix;
use crate::diffcore::GradientVector;
use crate::error::{Error, Result};

/// Nonnegative task weights, optionally constrained to the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerWeights {
    pub omega: Vec<f64>,
    pub simplex: bool,
}

impl CombinerWeights {
    pub fn sum(&self) -> f64 {
        self.omega.iter().sum()
    }
}

fn require_tasks(g: &GradientMatrix) -> Result<()> {
    if g.num_tasks() < 2 {
        return Err(Error::Precondition(format!(
            "K >= 2 required, got {}",
            g.num_tasks()
        )));
    }
    Ok(())
}

/// Linear scalarization: the mean gradient.
pub fn combine_ls(g: &GradientMatrix) -> Result<GradientVector> {
    require_tasks(g)?;
    Ok(g.mean().clone())
}

/// A configured combination strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum Combiner {
    Ls,
    Pcgrad,
    Cagrad {
        #[serde(default = "default_cagrad_c")]
        c: f64,
    },
    Fairgrad {
        #[serde(default = "default_fairgrad_alpha")]
        alpha: f64,
    },
}

fn default_cagrad_c() -> f64 {
    0.4
}

fn default_fairgrad_alpha() -> f64 {
    1.0
}

impl Combiner {
    pub fn name(&self) -> &'static str {
        match self {
            Combiner::Ls => "ls",
            Combiner::Pcgrad => "pcgrad",
            Combiner::Cagrad { .. } => "cagrad",
            Combiner::Fairgrad { .. } => "fairgrad",
        }
    }

    /// `seed` only matters for PCGrad's task-order shuffle.
    pub fn combine(&self, g: &GradientMatrix, seed: u64) -> Result<GradientVector> {
        match *self {
            Combiner::Ls => combine_ls(g),
            Combiner::Pcgrad => combine_pcgrad(g, seed),
            Combiner::Cagrad { c } => combine_cagrad(g, c),
            Combiner::Fairgrad { alpha } => combine_fairgrad(g, alpha),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Combiner::Cagrad { c } if !(c >= 0.0 && c.is_finite()) => {
                Err(Error::config("method.c", format!("must be a finite value >= 0, got {c}")))
            }
            Combiner::Fairgrad { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::config("method.alpha", format!("must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}
