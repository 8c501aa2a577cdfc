//! Prediction error, violation norms, cost difference and the model
//! selection score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridCase, OperatingPoint, SolutionLabels};
use crate::physics::{self, Demand, PhysicsOptions, ResidualSet, SystemState};

/// Pairwise (cascade) summation. Fixed reduction tree, so the result does
/// not depend on how callers chunk the work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn l2(xs: impl Iterator<Item = f64>) -> f64 {
    let sq: Vec<f64> = xs.map(|x| x * x).collect();
    pairwise_sum(&sq).sqrt()
}

pub fn mse(pred: &SystemState, label: &SolutionLabels) -> Result<f64> {
    for (field, a, b) in [
        ("v", pred.v.len(), label.v.len()),
        ("theta", pred.theta.len(), label.theta.len()),
        ("p_g", pred.p_g.len(), label.p_g.len()),
        ("q_g", pred.q_g.len(), label.q_g.len()),
    ] {
        if a != b {
            return Err(Error::dim(field, b, a));
        }
    }
    let sq: Vec<f64> = pred
        .v
        .iter()
        .zip(&label.v)
        .chain(pred.theta.iter().zip(&label.theta))
        .chain(pred.p_g.iter().zip(&label.p_g))
        .chain(pred.q_g.iter().zip(&label.q_g))
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    if sq.is_empty() {
        return Ok(0.0);
    }
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// Mean over samples of the l2 norm of each sample's residual stack.
pub fn violation_norm<S: AsRef<[f64]>>(per_sample: &[S]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let norms: Vec<f64> = per_sample
        .iter()
        .map(|s| l2(s.as_ref().iter().copied()))
        .collect();
    Ok(pairwise_sum(&norms) / norms.len() as f64)
}

/// `sum_c Viol_c / sqrt(N)`.
pub fn normalized_total_violation(viol_by_family: &[f64], bus_count: usize) -> f64 {
    viol_by_family.iter().sum::<f64>() / (bus_count.max(1) as f64).sqrt()
}

/// `MSE + Viol_total / sqrt(N)` with the un-normalized family sum.
pub fn validation_score(mse_val: f64, viol_total_val: f64, bus_count: usize) -> f64 {
    mse_val + viol_total_val / (bus_count.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDifference {
    pub abs: f64,
    /// Signed percentage; `None` when the true cost is zero.
    pub pct: Option<f64>,
}

pub fn cost_difference(case: &GridCase, pred_pg: &[f64], true_pg: &[f64]) -> Result<CostDifference> {
    let c_pred = physics::generation_cost(case, pred_pg)?;
    let c_true = physics::generation_cost(case, true_pg)?;
    Ok(cost_diff_from_totals(c_pred, c_true))
}

fn cost_diff_from_totals(c_pred: f64, c_true: f64) -> CostDifference {
    let abs = c_pred - c_true;
    CostDifference {
        abs,
        pct: (c_true != 0.0).then(|| 100.0 * abs / c_true),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub viol_power_balance: f64,
    pub viol_line: f64,
    pub viol_total_normalized: f64,
    /// Same as `viol_line` but on `max(0, |S| - S_max)`.
    pub viol_line_magnitude: f64,
    /// Largest box-bound excess over all samples. Should be ~0.
    pub box_max: f64,
    /// Per-sample `(power_balance, line)` norms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<[f64; 2]>>,
}

impl ViolationSummary {
    pub fn total(&self) -> f64 {
        self.viol_power_balance + self.viol_line
    }

    pub fn from_residuals(sets: &[ResidualSet], bus_count: usize, keep_per_sample: bool) -> Result<Self> {
        let pb: Vec<Vec<f64>> = sets
            .iter()
            .map(|s| s.r_p.iter().chain(&s.r_q).map(|x| x.abs()).collect())
            .collect();
        let line: Vec<&[f64]> = sets.iter().map(|s| s.h_line.as_slice()).collect();
        let mag: Vec<&[f64]> = sets.iter().map(|s| s.line_magnitude.as_slice()).collect();
        let viol_power_balance = violation_norm(&pb)?;
        let viol_line = violation_norm(&line)?;
        let per_sample = keep_per_sample.then(|| {
            pb.iter()
                .zip(&line)
                .map(|(p, l)| [l2(p.iter().copied()), l2(l.iter().copied())])
                .collect()
        });
        Ok(Self {
            viol_power_balance,
            viol_line,
            viol_total_normalized: normalized_total_violation(&[viol_power_balance, viol_line], bus_count),
            viol_line_magnitude: violation_norm(&mag)?,
            box_max: sets.iter().map(|s| s.boxes.max()).fold(0.0, f64::max),
            per_sample,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub case_id: String,
    pub samples: usize,
    pub bus_count: usize,
    pub mse: f64,
    #[serde(flatten)]
    pub viol: ViolationSummary,
    pub validation_score: f64,
    /// Mean over samples.
    pub cost_pred: f64,
    pub cost_true: f64,
    pub cost_diff_abs: f64,
    pub cost_diff_pct: Option<f64>,
}

/// Scores `preds` against the labels of `ops` on one topology.
pub fn evaluate(
    case: &GridCase,
    ops: &[OperatingPoint],
    preds: &[SystemState],
    opts: PhysicsOptions,
) -> Result<MetricBundle> {
    if ops.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if ops.len() != preds.len() {
        return Err(Error::dim("predictions", ops.len(), preds.len()));
    }
    let mut sets = Vec::with_capacity(ops.len());
    let mut errs = Vec::with_capacity(ops.len());
    let mut c_pred = Vec::with_capacity(ops.len());
    let mut c_true = Vec::with_capacity(ops.len());
    for (op, pred) in ops.iter().zip(preds) {
        let demand = Demand::for_point(case, op);
        sets.push(physics::full_residuals(case, &demand, pred, opts)?);
        errs.push(mse(pred, &op.labels)?);
        c_pred.push(physics::generation_cost(case, &pred.p_g)?);
        c_true.push(physics::generation_cost(case, &op.labels.p_g)?);
    }
    let n = case.bus_count();
    let viol = ViolationSummary::from_residuals(&sets, n, false)?;
    let count = ops.len() as f64;
    let mse = pairwise_sum(&errs) / count;
    let cost_pred = pairwise_sum(&c_pred) / count;
    let cost_true = pairwise_sum(&c_true) / count;
    let cd = cost_diff_from_totals(cost_pred, cost_true);
    Ok(MetricBundle {
        case_id: case.case_id.clone(),
        samples: ops.len(),
        bus_count: n,
        mse,
        validation_score: validation_score(mse, viol.total(), n),
        viol,
        cost_pred,
        cost_true,
        cost_diff_abs: cd.abs,
        cost_diff_pct: cd.pct,
    })
}
