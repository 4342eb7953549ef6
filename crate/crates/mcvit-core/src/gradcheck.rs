//! Finite-difference gradient checking.
//!
//! The analytic side comes from [`Graph::backward`]; the numeric side
//! re-evaluates the same builder with each parameter element nudged by
//! `±step` and takes the central difference. The builder is handed leaves in
//! the order of `params`, so the two paths see an identical computation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

/// Floor for the denominator of the relative error, so near-zero gradients
/// compare on an absolute scale of ~1e-6 instead of blowing up.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// Worst relative error across the tensor's elements.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Check the analytic gradient of a scalar-valued builder against central
/// finite differences for every element of every named parameter.
///
/// The builder receives one `VarId` per entry of `params`, in order, and must
/// return the scalar loss node.
pub fn gradcheck<F>(
    params: &[(String, Tensor)],
    mut build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[VarId]) -> Result<VarId>,
{
    // Analytic pass: all parameters as gradient leaves.
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<VarId> = params
            .iter()
            .map(|(_, t)| g.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut g, &ids)?;
        let grads = g.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(id, (_, t))| grads.get_or_zeros(*id, t.shape()))
            .collect()
    };

    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let eval = |work: &[Tensor], build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = work.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut entries = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let len = work[p].len();
        let mut worst = GradCheckEntry {
            name: params[p].0.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for e in 0..len {
            let original = work[p].data()[e];
            work[p].data_mut()[e] = original + step;
            let plus = eval(&work, &mut build)?;
            work[p].data_mut()[e] = original - step;
            let minus = eval(&work, &mut build)?;
            work[p].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[e];
            let rel = relative_error(a, numeric);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = e;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries, tolerance })
}
