use gridbench::grid::BusType;
use nalgebra::{DMatrix, DVector};

/// From-side flow on a series element `g + jb`.
pub(crate) fn flow(vi: f64, vj: f64, t: f64, g: f64, b: f64) -> (f64, f64) {
    let (s, c) = t.sin_cos();
    (
        vi * vi * g - vi * vj * (g * c + b * s),
        -vi * vi * b - vi * vj * (g * s - b * c),
    )
}

/// Partial derivatives of the from-side flow with respect to
/// `(theta_i, theta_j, v_i, v_j)`.
fn flow_grad(vi: f64, vj: f64, t: f64, g: f64, b: f64) -> ([f64; 4], [f64; 4]) {
    let (s, c) = t.sin_cos();
    let a = g * c + b * s;
    let d = g * s - b * c;
    let dp = [vi * vj * d, -vi * vj * d, 2.0 * vi * g - vj * a, -vi * a];
    let dq = [-vi * vj * a, vi * vj * a, -2.0 * vi * b - vj * d, -vi * d];
    (dp, dq)
}

#[derive(Debug, Clone)]
pub struct PfProblem {
    pub types: Vec<BusType>,
    /// `(from, to, g, b)`.
    pub branches: Vec<(usize, usize, f64, f64)>,
    /// `(bus, g_s, b_s)`.
    pub shunts: Vec<(usize, f64, f64)>,
    /// Net scheduled active injection per bus (generation minus demand).
    pub p_spec: Vec<f64>,
    /// Net scheduled reactive injection per bus; only PQ entries are used.
    pub q_spec: Vec<f64>,
    /// Voltage magnitude on slack and PV buses; PQ entries are the start.
    pub v_set: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// Net injection into the network at every bus, shunts included.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub iterations: usize,
    pub mismatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PfError {
    Singular,
    Diverged(f64),
}

impl std::fmt::Display for PfError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PfError::Singular => write!(f, "singular jacobian"),
            PfError::Diverged(m) => write!(f, "no convergence, mismatch {m:e}"),
        }
    }
}

impl std::error::Error for PfError {}

/// Injections computed from the network side: flows out plus shunt draw.
fn injections(pb: &PfProblem, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    for &(i, j, g, b) in &pb.branches {
        let (pij, qij) = flow(v[i], v[j], th[i] - th[j], g, b);
        let (pji, qji) = flow(v[j], v[i], th[j] - th[i], g, b);
        p[i] += pij;
        q[i] += qij;
        p[j] += pji;
        q[j] += qji;
    }
    for &(k, gs, bs) in &pb.shunts {
        p[k] += v[k] * v[k] * gs;
        q[k] -= v[k] * v[k] * bs;
    }
    (p, q)
}

/// Polar Newton-Raphson. Unknowns are the angles of non-slack buses and the
/// magnitudes of PQ buses; the slack angle is 0.
pub fn solve_power_flow(pb: &PfProblem) -> Result<PfSolution, PfError> {
    let n = pb.types.len();
    let ang: Vec<usize> = (0..n).filter(|&i| pb.types[i] != BusType::Slack).collect();
    let mag: Vec<usize> = (0..n).filter(|&i| pb.types[i] == BusType::Pq).collect();
    let mut col_th = vec![usize::MAX; n];
    let mut col_v = vec![usize::MAX; n];
    for (c, &i) in ang.iter().enumerate() {
        col_th[i] = c;
    }
    for (c, &i) in mag.iter().enumerate() {
        col_v[i] = ang.len() + c;
    }
    let dim = ang.len() + mag.len();

    let mut v = pb.v_set.clone();
    let mut th = vec![0.0; n];
    let mut mismatch = f64::INFINITY;
    for it in 0..30 {
        let (p, q) = injections(pb, &v, &th);
        let mut f = DVector::zeros(dim);
        for (r, &i) in ang.iter().enumerate() {
            f[r] = p[i] - pb.p_spec[i];
        }
        for (r, &i) in mag.iter().enumerate() {
            f[ang.len() + r] = q[i] - pb.q_spec[i];
        }
        mismatch = f.amax();
        if mismatch < 1e-13 {
            return Ok(PfSolution {
                v,
                theta: th,
                p_inj: p,
                q_inj: q,
                iterations: it,
                mismatch,
            });
        }
        if !mismatch.is_finite() || mismatch > 1e3 {
            return Err(PfError::Diverged(mismatch));
        }

        let mut jac = DMatrix::zeros(dim, dim);
        let mut add = |row_p: Option<usize>, row_q: Option<usize>, bus: usize, dp: f64, dq: f64, wrt_v: bool| {
            let col = if wrt_v { col_v[bus] } else { col_th[bus] };
            if col == usize::MAX {
                return;
            }
            if let Some(r) = row_p {
                jac[(r, col)] += dp;
            }
            if let Some(r) = row_q {
                jac[(r, col)] += dq;
            }
        };
        let row_p = |i: usize| (col_th[i] != usize::MAX).then_some(col_th[i]);
        let row_q = |i: usize| (col_v[i] != usize::MAX).then_some(col_v[i]);
        for &(i, j, g, b) in &pb.branches {
            for (a, c) in [(i, j), (j, i)] {
                let (dp, dq) = flow_grad(v[a], v[c], th[a] - th[c], g, b);
                add(row_p(a), row_q(a), a, dp[0], dq[0], false);
                add(row_p(a), row_q(a), c, dp[1], dq[1], false);
                add(row_p(a), row_q(a), a, dp[2], dq[2], true);
                add(row_p(a), row_q(a), c, dp[3], dq[3], true);
            }
        }
        for &(k, gs, bs) in &pb.shunts {
            add(row_p(k), row_q(k), k, 2.0 * v[k] * gs, -2.0 * v[k] * bs, true);
        }

        let dx = jac.lu().solve(&(-f)).ok_or(PfError::Singular)?;
        for &i in &ang {
            th[i] += dx[col_th[i]];
        }
        for &i in &mag {
            v[i] += dx[col_v[i]];
        }
    }
    Err(PfError::Diverged(mismatch))
}
