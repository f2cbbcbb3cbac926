//! Gradient surgery: project away the conflicting component of each task
//! gradient against the other tasks, in a seeded random order.

use rand::seq::SliceRandom;

use super::require_tasks;
use crate::conflict::GradientMatrix;
use crate::diffcore::GradientVector;
use crate::error::Result;
use crate::linalg::{axpy, dot};
use crate::rng::seeded;

/// Adjusted gradients plus, per task, the last row it was projected against.
#[derive(Debug, Clone, PartialEq)]
pub struct PcGradSurgery {
    pub adjusted: Vec<GradientVector>,
    pub last_projection: Vec<Option<usize>>,
}

pub fn pcgrad_surgery(g: &GradientMatrix, seed: u64) -> Result<PcGradSurgery> {
    require_tasks(g)?;
    let k = g.num_tasks();
    let mut rng = seeded(seed);
    let mut adjusted = Vec::with_capacity(k);
    let mut last_projection = Vec::with_capacity(k);
    for i in 0..k {
        let mut gi = g.row(i).to_vec();
        let mut order: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        order.shuffle(&mut rng);
        let mut last = None;
        for j in order {
            let gj = g.row(j);
            let nn = dot(gj, gj);
            if nn == 0.0 {
                continue;
            }
            let d = dot(&gi, gj);
            if d < 0.0 {
                axpy(-d / nn, gj, &mut gi);
                last = Some(j);
            }
        }
        adjusted.push(gi.into());
        last_projection.push(last);
    }
    Ok(PcGradSurgery {
        adjusted,
        last_projection,
    })
}

/// Mean of the surgically adjusted task gradients.
pub fn combine_pcgrad(g: &GradientMatrix, seed: u64) -> Result<GradientVector> {
    let surgery = pcgrad_surgery(g, seed)?;
    let k = surgery.adjusted.len() as f64;
    let mut out = vec![0.0; g.dim()];
    for a in &surgery.adjusted {
        axpy(1.0, a, &mut out);
    }
    for v in &mut out {
        *v /= k;
    }
    Ok(out.into())
}
