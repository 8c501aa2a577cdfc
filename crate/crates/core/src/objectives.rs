//! Training objectives (MSE, augmented Lagrangian, violation-based
//! Lagrangian), their dual state, and the optional generation-cost term.
//!
//! Residuals are rebuilt on the tape from the predicted state so gradients
//! reach the model parameters. Sign conventions match [`crate::physics`];
//! the line residual here is the signed surplus `P^2 + Q^2 - S^2` (not
//! clipped), and the losses decide how to clip it.

use std::collections::BTreeMap;
use std::rc::Rc;

use gridbench_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridCase, SolutionLabels};
use crate::models::PredVars;
use crate::physics::{Demand, PhysicsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Mse,
    Al,
    Vbl,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Self::Mse),
            "al" => Ok(Self::Al),
            "vbl" => Ok(Self::Vbl),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Al => "al",
            Self::Vbl => "vbl",
        })
    }
}

/// Case structure needed to build residuals on a tape.
#[derive(Debug, Clone)]
pub struct ResidualPlan {
    n_bus: usize,
    from: Rc<[usize]>,
    to: Rc<[usize]>,
    g: Tensor,
    b: Tensor,
    gen_bus: Rc<[usize]>,
    limited: Rc<[usize]>,
    s_max_sq: Tensor,
    shunt_g: Tensor,
    shunt_b: Tensor,
}

impl ResidualPlan {
    pub fn new(case: &GridCase, opts: PhysicsOptions) -> Self {
        let n = case.bus_count();
        let (mut gs, mut bs) = (vec![0.0; n], vec![0.0; n]);
        if opts.include_shunts {
            for s in &case.shunts {
                gs[s.bus] += s.g_s;
                bs[s.bus] += s.b_s;
            }
        }
        let limited: Vec<usize> = case.limited_branches().map(|(k, _)| k).collect();
        Self {
            n_bus: n,
            from: case.branches.iter().map(|b| b.from_bus).collect(),
            to: case.branches.iter().map(|b| b.to_bus).collect(),
            g: Tensor::column(case.branches.iter().map(|b| b.g).collect()),
            b: Tensor::column(case.branches.iter().map(|b| b.b).collect()),
            gen_bus: case.generators.iter().map(|g| g.bus).collect(),
            s_max_sq: Tensor::column(
                limited.iter().map(|&k| case.branches[k].s_max.powi(2)).collect(),
            ),
            limited: limited.into(),
            shunt_g: Tensor::column(gs),
            shunt_b: Tensor::column(bs),
        }
    }

    pub fn eq_len(&self) -> usize {
        2 * self.n_bus
    }

    pub fn ineq_len(&self) -> usize {
        self.limited.len()
    }
}

/// Differentiable residuals of one sample.
#[derive(Debug, Clone, Copy)]
pub struct TapeResiduals {
    /// `[r_p; r_q]`, `2 N x 1`.
    pub r: Var,
    /// Signed line surplus on limited branches, `L x 1`.
    pub h: Var,
}

/// Power-balance and line residuals of `pred` under `demand`, on the tape.
pub fn tape_residuals(
    tape: &mut Tape,
    plan: &ResidualPlan,
    demand: &Demand,
    pred: &PredVars,
) -> Result<TapeResiduals> {
    let n = plan.n_bus;
    if demand.p.len() != n || demand.q.len() != n {
        return Err(Error::dim("demand", n, demand.p.len().min(demand.q.len())));
    }
    let g = tape.constant(plan.g.clone());
    let b = tape.constant(plan.b.clone());
    let vf = tape.gather_rows(pred.v, plan.from.clone())?;
    let vt = tape.gather_rows(pred.v, plan.to.clone())?;
    let tf = tape.gather_rows(pred.theta, plan.from.clone())?;
    let tt = tape.gather_rows(pred.theta, plan.to.clone())?;
    let dt = tape.sub(tf, tt)?;
    let c = tape.cos(dt);
    let s = tape.sin(dt);
    let vf2 = tape.square(vf);
    let vt2 = tape.square(vt);
    let vv = tape.mul(vf, vt)?;
    let gc = tape.mul(g, c)?;
    let gs = tape.mul(g, s)?;
    let bc = tape.mul(b, c)?;
    let bs = tape.mul(b, s)?;

    // from side: P = vf^2 g - vf vt (g c + b s), Q = -vf^2 b - vf vt (g s - b c)
    let vf2g = tape.mul(vf2, g)?;
    let vf2b = tape.mul(vf2, b)?;
    let a = tape.add(gc, bs)?;
    let a = tape.mul(vv, a)?;
    let p_ft = tape.sub(vf2g, a)?;
    let a = tape.sub(gs, bc)?;
    let a = tape.mul(vv, a)?;
    let q_ft = tape.add(vf2b, a)?;
    let q_ft = tape.neg(q_ft);
    // to side: P = vt^2 g - vf vt (g c - b s), Q = -vt^2 b + vf vt (g s + b c)
    let vt2g = tape.mul(vt2, g)?;
    let vt2b = tape.mul(vt2, b)?;
    let a = tape.sub(gc, bs)?;
    let a = tape.mul(vv, a)?;
    let p_tf = tape.sub(vt2g, a)?;
    let a = tape.add(gs, bc)?;
    let a = tape.mul(vv, a)?;
    let q_tf = tape.sub(a, vt2b)?;

    let flow = |tape: &mut Tape, ft: Var, tf: Var| -> Result<Var> {
        let x = tape.scatter_add_rows(ft, plan.from.clone(), n)?;
        let y = tape.scatter_add_rows(tf, plan.to.clone(), n)?;
        Ok(tape.add(x, y)?)
    };
    let fp = flow(tape, p_ft, p_tf)?;
    let fq = flow(tape, q_ft, q_tf)?;
    let pg = tape.scatter_add_rows(pred.p_g, plan.gen_bus.clone(), n)?;
    let qg = tape.scatter_add_rows(pred.q_g, plan.gen_bus.clone(), n)?;
    let pd = tape.constant(Tensor::column(demand.p.clone()));
    let qd = tape.constant(Tensor::column(demand.q.clone()));
    let v2 = tape.square(pred.v);
    let sg = tape.constant(plan.shunt_g.clone());
    let sb = tape.constant(plan.shunt_b.clone());

    let r_p = tape.sub(pg, pd)?;
    let x = tape.mul(v2, sg)?;
    let r_p = tape.sub(r_p, x)?;
    let r_p = tape.sub(r_p, fp)?;
    let r_q = tape.sub(qg, qd)?;
    let x = tape.mul(v2, sb)?;
    let r_q = tape.add(r_q, x)?;
    let r_q = tape.sub(r_q, fq)?;
    let r = tape.concat_rows(&[r_p, r_q])?;

    let pl = tape.gather_rows(p_ft, plan.limited.clone())?;
    let ql = tape.gather_rows(q_ft, plan.limited.clone())?;
    let pl = tape.square(pl);
    let ql = tape.square(ql);
    let s2 = tape.add(pl, ql)?;
    let cap = tape.constant(plan.s_max_sq.clone());
    let h = tape.sub(s2, cap)?;
    Ok(TapeResiduals { r, h })
}

/// Loss terms of one evaluation; `total` is the objective's combination.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub mse: Var,
    pub eq: Var,
    pub ineq: Var,
    pub penalty: Var,
    pub cost: Var,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub mse: f64,
    pub eq: f64,
    pub ineq: f64,
    pub penalty: f64,
    pub cost: f64,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0];
        LossValues {
            total: v(self.total),
            mse: v(self.mse),
            eq: v(self.eq),
            ineq: v(self.ineq),
            penalty: v(self.penalty),
            cost: v(self.cost),
        }
    }

    fn from_terms(tape: &mut Tape, mse: Var, eq: Var, ineq: Var, penalty: Var, cost: Var) -> Result<Self> {
        let mut total = mse;
        for t in [eq, ineq, penalty, cost] {
            total = tape.add(total, t)?;
        }
        Ok(Self {
            total,
            mse,
            eq,
            ineq,
            penalty,
            cost,
        })
    }

    /// Finite check with the offending term named.
    pub fn check_finite(&self, tape: &Tape, samples_seen: u64) -> Result<()> {
        let v = self.values(tape);
        for (term, x) in [
            ("mse", v.mse),
            ("eq", v.eq),
            ("ineq", v.ineq),
            ("penalty", v.penalty),
            ("cost", v.cost),
            ("total", v.total),
        ] {
            if !x.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: term.into(),
                    samples_seen,
                });
            }
        }
        Ok(())
    }
}

impl LossValues {
    pub fn add_scaled(&mut self, other: &LossValues, k: f64) {
        self.total += k * other.total;
        self.mse += k * other.mse;
        self.eq += k * other.eq;
        self.ineq += k * other.ineq;
        self.penalty += k * other.penalty;
        self.cost += k * other.cost;
    }
}

fn label_column(tape: &mut Tape, xs: &[f64], pred: Var, field: &str) -> Result<Var> {
    let rows = tape.value(pred).rows();
    if rows != xs.len() {
        return Err(Error::dim(field, xs.len(), rows));
    }
    Ok(tape.constant(Tensor::column(xs.to_vec())))
}

/// Mean squared error over the concatenated prediction vector.
pub fn mse_term(tape: &mut Tape, pred: &PredVars, label: &SolutionLabels) -> Result<Var> {
    let parts = [
        (pred.v, &label.v, "v"),
        (pred.theta, &label.theta, "theta"),
        (pred.p_g, &label.p_g, "p_g"),
        (pred.q_g, &label.q_g, "q_g"),
    ];
    let mut dim = 0;
    let mut total: Option<Var> = None;
    for (p, l, field) in parts {
        let lab = label_column(tape, l, p, field)?;
        dim += l.len();
        if l.is_empty() {
            continue;
        }
        let d = tape.sub(p, lab)?;
        let d = tape.square(d);
        let s = tape.sum(d);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(match total {
        Some(t) => tape.scale(t, 1.0 / dim as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn dot(tape: &mut Tape, weights: &[f64], x: Var, field: &str) -> Result<Var> {
    let rows = tape.value(x).rows();
    if rows != weights.len() {
        return Err(Error::dim(field, rows, weights.len()));
    }
    if rows == 0 {
        return Ok(zero(tape));
    }
    let w = tape.constant(Tensor::row(weights.to_vec()));
    Ok(tape.matmul(w, x)?)
}

fn half_rho_sq(tape: &mut Tape, rho: f64, x: Var) -> Var {
    let s = tape.square(x);
    let s = tape.sum(s);
    tape.scale(s, 0.5 * rho)
}

pub fn loss_mse(tape: &mut Tape, pred: &PredVars, label: &SolutionLabels) -> Result<LossBreakdown> {
    let mse = mse_term(tape, pred, label)?;
    let z = zero(tape);
    LossBreakdown::from_terms(tape, mse, z, z, z, z)
}

/// `L_MSE + lambda.r + (rho/2)|r|^2 + mu.max(h,0) + (rho/2)|max(h,0)|^2`;
/// `literal_quadratic` penalizes `|h|^2` instead.
pub fn loss_al(
    tape: &mut Tape,
    pred: &PredVars,
    label: &SolutionLabels,
    res: &TapeResiduals,
    dual: &CaseDual,
    rho: f64,
    literal_quadratic: bool,
) -> Result<LossBreakdown> {
    let mse = mse_term(tape, pred, label)?;
    let eq = dot(tape, &dual.lambda, res.r, "lambda")?;
    let hp = tape.max_with_zero(res.h);
    let ineq = dot(tape, &dual.mu, hp, "mu")?;
    let pr = half_rho_sq(tape, rho, res.r);
    let ph = half_rho_sq(tape, rho, if literal_quadratic { res.h } else { hp });
    let penalty = tape.add(pr, ph)?;
    let z = zero(tape);
    LossBreakdown::from_terms(tape, mse, eq, ineq, penalty, z)
}

/// `L_MSE + lambda.|r| + mu.max(h,0)`.
pub fn loss_vbl(
    tape: &mut Tape,
    pred: &PredVars,
    label: &SolutionLabels,
    res: &TapeResiduals,
    dual: &CaseDual,
) -> Result<LossBreakdown> {
    let mse = mse_term(tape, pred, label)?;
    let ar = tape.abs(res.r);
    let eq = dot(tape, &dual.lambda, ar, "lambda")?;
    let hp = tape.max_with_zero(res.h);
    let ineq = dot(tape, &dual.mu, hp, "mu")?;
    let z = zero(tape);
    LossBreakdown::from_terms(tape, mse, eq, ineq, z, z)
}

/// Adds `cost_weight * C(p_g) / c_ref` as the cost term.
pub fn compose_with_cost(
    tape: &mut Tape,
    loss: LossBreakdown,
    case: &GridCase,
    pred_pg: Var,
    cost_weight: f64,
    c_ref: f64,
) -> Result<LossBreakdown> {
    if cost_weight == 0.0 {
        return Ok(loss);
    }
    if !(cost_weight > 0.0 && cost_weight.is_finite()) {
        return Err(Error::Config(format!("cost_weight {cost_weight} must be >= 0")));
    }
    if !(c_ref > 0.0 && c_ref.is_finite()) {
        return Err(Error::NonPositiveInput(format!("reference cost {c_ref}")));
    }
    let ng = case.generators.len();
    let rows = tape.value(pred_pg).rows();
    if rows != ng {
        return Err(Error::dim("p_g", ng, rows));
    }
    let cost = if ng == 0 {
        zero(tape)
    } else {
        let c2 = tape.constant(Tensor::row(case.generators.iter().map(|g| g.c2).collect()));
        let c1 = tape.constant(Tensor::row(case.generators.iter().map(|g| g.c1).collect()));
        let c0: f64 = case.generators.iter().map(|g| g.c0).sum();
        let sq = tape.square(pred_pg);
        let a = tape.matmul(c2, sq)?;
        let b = tape.matmul(c1, pred_pg)?;
        let c = tape.add(a, b)?;
        tape.add_scalar(c, c0)
    };
    let cost = tape.scale(cost, cost_weight / c_ref);
    let total = tape.add(loss.total, cost)?;
    let prior = loss.cost;
    let cost = tape.add(prior, cost)?;
    Ok(LossBreakdown { total, cost, ..loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualSchedule {
    pub warmup_samples: u64,
    pub multiplier_check_samples: u64,
    pub penalty_check_samples: u64,
}

/// Multipliers and residual buffers of one topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDual {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub ema_r: Vec<f64>,
    pub ema_h: Vec<f64>,
    acc_r: Vec<f64>,
    acc_h: Vec<f64>,
    acc_n: u64,
}

impl CaseDual {
    pub fn zeros(eq: usize, ineq: usize) -> Self {
        Self {
            lambda: vec![0.0; eq],
            mu: vec![0.0; ineq],
            ema_r: vec![0.0; eq],
            ema_h: vec![0.0; ineq],
            acc_r: vec![0.0; eq],
            acc_h: vec![0.0; ineq],
            acc_n: 0,
        }
    }

    pub fn for_plan(plan: &ResidualPlan) -> Self {
        Self::zeros(plan.eq_len(), plan.ineq_len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub rho: f64,
    pub ema_factor: f64,
    pub rho_growth: f64,
    pub schedule: DualSchedule,
    pub cases: BTreeMap<String, CaseDual>,
    last_seen: u64,
}

impl DualState {
    pub fn new(rho: f64, ema_factor: f64, schedule: DualSchedule) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho {rho} must be > 0")));
        }
        if !(0.0..=1.0).contains(&ema_factor) {
            return Err(Error::Config(format!("ema_factor {ema_factor} outside [0, 1]")));
        }
        Ok(Self {
            rho,
            ema_factor,
            rho_growth: 1.0,
            schedule,
            cases: BTreeMap::new(),
            last_seen: 0,
        })
    }

    pub fn register(&mut self, case_id: &str, plan: &ResidualPlan) {
        self.cases
            .entry(case_id.to_string())
            .or_insert_with(|| CaseDual::for_plan(plan));
    }

    pub fn case(&self, case_id: &str) -> Result<&CaseDual> {
        self.cases
            .get(case_id)
            .ok_or_else(|| Error::DataMissing(format!("no dual state for case `{case_id}`")))
    }
}

/// Residual values of one sample, read off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub r: Vec<f64>,
    pub h: Vec<f64>,
}

impl ResidualSample {
    pub fn read(tape: &Tape, res: &TapeResiduals) -> Self {
        Self {
            r: tape.value(res.r).data().to_vec(),
            h: tape.value(res.h).data().to_vec(),
        }
    }
}

/// One projected ascent step. `r_bar` and `h_bar` are the smoothed
/// statistics the caller derived for `kind`.
pub fn ascent_step(kind: ObjectiveKind, dual: &mut CaseDual, rho: f64, r_bar: &[f64], h_bar: &[f64]) {
    match kind {
        ObjectiveKind::Mse => {}
        ObjectiveKind::Al => {
            for (l, r) in dual.lambda.iter_mut().zip(r_bar) {
                *l += rho * r;
            }
            for (m, h) in dual.mu.iter_mut().zip(h_bar) {
                *m = (*m + rho * h.max(0.0)).max(0.0);
            }
        }
        ObjectiveKind::Vbl => {
            for (l, r) in dual.lambda.iter_mut().zip(r_bar) {
                *l += rho * r.abs();
            }
            for (m, h) in dual.mu.iter_mut().zip(h_bar) {
                *m += rho * h.max(0.0);
            }
        }
    }
}

fn crossed(prev: u64, now: u64, every: u64) -> bool {
    every == 0 || now / every > prev / every
}

/// Feeds one batch of residuals for `case_id` into the dual state.
///
/// Before `warmup_samples` nothing changes. Afterwards the batch is added
/// to the interval accumulator; when `samples_seen` crosses a multiplier
/// check boundary every case with accumulated samples updates its EMA
/// buffers with the interval mean and takes one ascent step. The AL
/// statistic is the signed residual, the VBL statistic is `|r|` and
/// `max(h, 0)`. Crossing a penalty check boundary multiplies `rho` by
/// `rho_growth`.
pub fn update_duals(
    kind: ObjectiveKind,
    dual: &mut DualState,
    case_id: &str,
    batch: &[ResidualSample],
    samples_seen: u64,
) -> Result<()> {
    if kind == ObjectiveKind::Mse || samples_seen < dual.schedule.warmup_samples {
        return Ok(());
    }
    let cd = dual
        .cases
        .get_mut(case_id)
        .ok_or_else(|| Error::DataMissing(format!("no dual state for case `{case_id}`")))?;
    for s in batch {
        if s.r.len() != cd.acc_r.len() {
            return Err(Error::dim("r", cd.acc_r.len(), s.r.len()));
        }
        if s.h.len() != cd.acc_h.len() {
            return Err(Error::dim("h", cd.acc_h.len(), s.h.len()));
        }
        for (a, r) in cd.acc_r.iter_mut().zip(&s.r) {
            *a += if kind == ObjectiveKind::Vbl { r.abs() } else { *r };
        }
        for (a, h) in cd.acc_h.iter_mut().zip(&s.h) {
            *a += if kind == ObjectiveKind::Vbl { h.max(0.0) } else { *h };
        }
        cd.acc_n += 1;
    }

    let prev = dual.last_seen;
    dual.last_seen = samples_seen;
    if crossed(prev, samples_seen, dual.schedule.multiplier_check_samples) {
        let (ema, rho) = (dual.ema_factor, dual.rho);
        for cd in dual.cases.values_mut() {
            if cd.acc_n == 0 {
                continue;
            }
            let n = cd.acc_n as f64;
            for (b, a) in cd.ema_r.iter_mut().zip(cd.acc_r.iter_mut()) {
                *b = ema * *b + (1.0 - ema) * (*a / n);
                *a = 0.0;
            }
            for (b, a) in cd.ema_h.iter_mut().zip(cd.acc_h.iter_mut()) {
                *b = ema * *b + (1.0 - ema) * (*a / n);
                *a = 0.0;
            }
            cd.acc_n = 0;
            let (r_bar, h_bar) = (cd.ema_r.clone(), cd.ema_h.clone());
            ascent_step(kind, cd, rho, &r_bar, &h_bar);
        }
    }
    if dual.schedule.penalty_check_samples > 0
        && crossed(prev, samples_seen, dual.schedule.penalty_check_samples)
    {
        dual.rho *= dual.rho_growth;
    }
    Ok(())
}
