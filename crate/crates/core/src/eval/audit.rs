use std::fmt::Write as _;

use factr_autodiff::Real;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{analytic_param_count, Checkpoint, Factr, ParamBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Enumerated and closed-form parameter counts of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamAudit {
    pub tensors: Vec<TensorCount>,
    pub enumerated: usize,
    pub analytic: ParamBreakdown,
}

impl ParamAudit {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tensors {
            let _ = writeln!(out, "{:<24} {:>16} {:>10}", t.name, format!("{:?}", t.shape), t.count);
        }
        let _ = writeln!(out, "blocks:");
        for (block, n) in &self.analytic.blocks {
            let _ = writeln!(out, "  {block:<10} {n:>10}");
        }
        let _ = writeln!(out, "total {}", self.enumerated);
        out
    }
}

/// Counts every tensor of a full checkpoint and cross-checks the total
/// against the closed form. A mismatch is an integrity error.
pub fn audit_params<F: Real>(checkpoint: &Checkpoint<F>) -> Result<ParamAudit> {
    let model: Factr<F> = checkpoint.clone().into_model()?;
    let tensors: Vec<TensorCount> = model
        .params()
        .iter()
        .map(|(name, t)| TensorCount {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            count: t.numel(),
        })
        .collect();
    let enumerated = tensors.iter().map(|t| t.count).sum();
    let analytic = analytic_param_count(model.config());
    if analytic.total != enumerated {
        return Err(Error::Integrity {
            analytic: analytic.total,
            enumerated,
        });
    }
    Ok(ParamAudit {
        tensors,
        enumerated,
        analytic,
    })
}
