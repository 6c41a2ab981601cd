//! Training objectives recorded on the tape.
//!
//! Query rows are stacked `[B * K, C]`, batch element major. Compactness and
//! separateness sum over the `K` queries of a frame and average over the
//! batch; the reconstruction term averages the per-frame L2 distance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::memory::Assignment;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub alpha: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_c) || !ok(self.lambda_s) {
            return Err(Error::config(format!(
                "loss weights must be non-negative, got lambda_c={} lambda_s={}",
                self.lambda_c, self.lambda_s
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("separateness margin must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub compact: f64,
    pub separate: f64,
    pub total: f64,
}

/// Tape handles of the individual terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec: Var,
    pub compact: Var,
    pub separate: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            rec: v(self.rec),
            compact: v(self.compact),
            separate: v(self.separate),
            total: v(self.total),
        }
    }
}

/// Mean over the batch (leading axis) of `||recon - target||_2`.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, recon: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(recon).to_vec();
    if shape != tape.shape(target) {
        return Err(Error::shape(
            "reconstruction loss",
            format!("output {shape:?} vs target {:?}", tape.shape(target)),
        ));
    }
    let batch = shape[0];
    let diff = tape.sub(recon, target)?;
    let flat = tape.reshape(diff, &[batch, shape[1..].iter().product()])?;
    let norms = tape.l2_norm(flat, 1)?;
    Ok(tape.mean(norms))
}

fn check_rows<T: Scalar>(tape: &Tape<T>, op: &'static str, queries: Var, items: Var, index: &[usize], batch: usize) -> Result<()> {
    let (q, p) = (tape.shape(queries), tape.shape(items));
    if q.len() != 2 || p.len() != 2 || q[1] != p[1] {
        return Err(Error::shape(op, format!("queries {q:?} vs items {p:?}")));
    }
    if index.len() != q[0] || batch == 0 || q[0] % batch != 0 {
        return Err(Error::shape(
            op,
            format!("{} assignments for {} queries in a batch of {batch}", index.len(), q[0]),
        ));
    }
    Ok(())
}

/// `||q_k - p_{index[k]}||_2` per query row, shape `[N]`.
fn distances_to<T: Scalar>(tape: &mut Tape<T>, queries: Var, items: Var, index: &[usize]) -> Result<Var> {
    let targets = tape.gather_rows(items, index)?;
    let diff = tape.sub(queries, targets)?;
    tape.l2_norm(diff, 1)
}

pub fn compactness_loss<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    items: Var,
    nearest: &[usize],
    batch: usize,
) -> Result<Var> {
    check_rows(tape, "compactness loss", queries, items, nearest, batch)?;
    let d = distances_to(tape, queries, items, nearest)?;
    let s = tape.sum(d);
    Ok(tape.scale(s, lit(1.0 / batch as f64)))
}

pub fn separateness_loss<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    items: Var,
    assignment: &Assignment,
    alpha: f64,
    batch: usize,
) -> Result<Var> {
    if tape.shape(items).first().is_some_and(|&m| m < 2) {
        return Err(Error::config("separateness loss needs at least two memory items"));
    }
    check_rows(tape, "separateness loss", queries, items, &assignment.nearest, batch)?;
    check_rows(tape, "separateness loss", queries, items, &assignment.second, batch)?;
    let dp = distances_to(tape, queries, items, &assignment.nearest)?;
    let dn = distances_to(tape, queries, items, &assignment.second)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(gap, lit(alpha));
    let hinge = tape.relu(shifted);
    let s = tape.sum(hinge);
    Ok(tape.scale(s, lit(1.0 / batch as f64)))
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, rec: Var, compact: Var, separate: Var, weights: &LossWeights) -> Result<LossVars> {
    let c = tape.scale(compact, lit(weights.lambda_c));
    let s = tape.scale(separate, lit(weights.lambda_s));
    let partial = tape.add(rec, c)?;
    let total = tape.add(partial, s)?;
    Ok(LossVars {
        rec,
        compact,
        separate,
        total,
    })
}

/// Records all three terms and their weighted sum.
pub fn training_losses<T: Scalar>(
    tape: &mut Tape<T>,
    recon: Var,
    target: Var,
    queries: Var,
    items: Var,
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let batch = tape.shape(recon)[0];
    let rec = reconstruction_loss(tape, recon, target)?;
    let compact = compactness_loss(tape, queries, items, &assignment.nearest, batch)?;
    let separate = separateness_loss(tape, queries, items, assignment, weights.alpha, batch)?;
    total_loss(tape, rec, compact, separate, weights)
}
