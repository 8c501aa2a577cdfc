//! Exact AC residuals and generation cost for a candidate solution.
//!
//! Everything here is a pure function of its inputs, evaluated in double
//! precision with no small-angle approximation. The differentiable twin of
//! these formulas used during training lives in `objectives::residuals`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridCase, OperatingPoint, SolutionLabels};

/// Candidate values for every decision variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
}

impl From<&SolutionLabels> for SystemState {
    fn from(l: &SolutionLabels) -> Self {
        Self {
            v: l.v.clone(),
            theta: l.theta.clone(),
            p_g: l.p_g.clone(),
            q_g: l.q_g.clone(),
        }
    }
}

impl SystemState {
    /// Flat start: `v = 1`, `theta = 0`, no generation.
    pub fn flat(case: &GridCase) -> Self {
        let (n, g) = (case.bus_count(), case.generators.len());
        Self {
            v: vec![1.0; n],
            theta: vec![0.0; n],
            p_g: vec![0.0; g],
            q_g: vec![0.0; g],
        }
    }

    /// `(v, theta, p_g, q_g)` concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.v.len() * 2 + self.p_g.len() * 2);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.theta);
        out.extend_from_slice(&self.p_g);
        out.extend_from_slice(&self.q_g);
        out
    }

    pub fn check_dims(&self, case: &GridCase) -> Result<()> {
        let (n, g) = (case.bus_count(), case.generators.len());
        for (field, got, expected) in [
            ("v", self.v.len(), n),
            ("theta", self.theta.len(), n),
            ("p_g", self.p_g.len(), g),
            ("q_g", self.q_g.len(), g),
        ] {
            if got != expected {
                return Err(Error::dim(field, expected, got));
            }
        }
        Ok(())
    }
}

/// Per-bus demand in effect for one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Demand {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Demand {
    pub fn base(case: &GridCase) -> Self {
        Self::for_point(case, &case.base_point(empty_labels()))
    }

    pub fn for_point(case: &GridCase, op: &OperatingPoint) -> Self {
        let (p, q) = case.bus_demand(op);
        Self { p, q }
    }
}

fn empty_labels() -> SolutionLabels {
    SolutionLabels {
        v: vec![],
        theta: vec![],
        p_g: vec![],
        q_g: vec![],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsOptions {
    /// Include shunt injections in the power balance.
    pub include_shunts: bool,
}

impl Default for PhysicsOptions {
    fn default() -> Self {
        Self {
            include_shunts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxResiduals {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
}

impl BoxResiduals {
    pub fn max(&self) -> f64 {
        self.v
            .iter()
            .chain(&self.theta)
            .chain(&self.p_g)
            .chain(&self.q_g)
            .fold(0.0, |m, &x| m.max(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub r_p: Vec<f64>,
    pub r_q: Vec<f64>,
    /// Clipped quadratic surplus on limited branches, in branch order.
    pub h_line: Vec<f64>,
    /// Clipped `sqrt(P^2 + Q^2) - S_max`, reported alongside `h_line`.
    pub line_magnitude: Vec<f64>,
    pub boxes: BoxResiduals,
}

impl ResidualSet {
    /// Largest absolute entry per family: (balance, line, box).
    pub fn max_by_family(&self) -> (f64, f64, f64) {
        let bal = self
            .r_p
            .iter()
            .chain(&self.r_q)
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        let line = self.h_line.iter().fold(0.0_f64, |m, &x| m.max(x));
        (bal, line, self.boxes.max())
    }
}

/// From-side active and reactive flow on a series element.
#[inline]
pub fn branch_flow(v_i: f64, v_j: f64, theta_ij: f64, g: f64, b: f64) -> (f64, f64) {
    let (s, c) = theta_ij.sin_cos();
    let vv = v_i * v_j;
    let p = v_i * v_i * g - vv * (g * c + b * s);
    let q = -v_i * v_i * b - vv * (g * s - b * c);
    (p, q)
}

/// Quadratic thermal surplus `P^2 + Q^2 - S_max^2`, unclipped.
#[inline]
pub fn line_surplus(p: f64, q: f64, s_max: f64) -> f64 {
    (p * p + q * q) - s_max * s_max
}

fn check_demand(case: &GridCase, demand: &Demand) -> Result<()> {
    let n = case.bus_count();
    if demand.p.len() != n {
        return Err(Error::dim("demand.p", n, demand.p.len()));
    }
    if demand.q.len() != n {
        return Err(Error::dim("demand.q", n, demand.q.len()));
    }
    Ok(())
}

/// Bus-wise active and reactive mismatch: injections minus outgoing flow.
pub fn power_balance_residuals(
    case: &GridCase,
    demand: &Demand,
    state: &SystemState,
    opts: PhysicsOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    state.check_dims(case)?;
    check_demand(case, demand)?;
    let n = case.bus_count();
    let mut r_p: Vec<f64> = demand.p.iter().map(|&d| -d).collect();
    let mut r_q: Vec<f64> = demand.q.iter().map(|&d| -d).collect();
    for (k, g) in case.generators.iter().enumerate() {
        r_p[g.bus] += state.p_g[k];
        r_q[g.bus] += state.q_g[k];
    }
    if opts.include_shunts {
        for s in &case.shunts {
            let v2 = state.v[s.bus] * state.v[s.bus];
            r_p[s.bus] -= v2 * s.g_s;
            r_q[s.bus] += v2 * s.b_s;
        }
    }
    for br in &case.branches {
        let (i, j) = (br.from_bus, br.to_bus);
        let dt = state.theta[i] - state.theta[j];
        let (p_ij, q_ij) = branch_flow(state.v[i], state.v[j], dt, br.g, br.b);
        let (p_ji, q_ji) = branch_flow(state.v[j], state.v[i], -dt, br.g, br.b);
        r_p[i] -= p_ij;
        r_q[i] -= q_ij;
        r_p[j] -= p_ji;
        r_q[j] -= q_ji;
    }
    debug_assert_eq!(r_p.len(), n);
    Ok((r_p, r_q))
}

/// From-side flows on every branch.
pub fn branch_flows(case: &GridCase, state: &SystemState) -> Result<Vec<(f64, f64)>> {
    state.check_dims(case)?;
    Ok(case
        .branches
        .iter()
        .map(|br| {
            let (i, j) = (br.from_bus, br.to_bus);
            branch_flow(
                state.v[i],
                state.v[j],
                state.theta[i] - state.theta[j],
                br.g,
                br.b,
            )
        })
        .collect())
}

/// `max(0, P^2 + Q^2 - S_max^2)` at the from side of each limited branch.
pub fn line_limit_residuals(case: &GridCase, state: &SystemState) -> Result<Vec<f64>> {
    let flows = branch_flows(case, state)?;
    Ok(case
        .limited_branches()
        .map(|(k, br)| line_surplus(flows[k].0, flows[k].1, br.s_max).max(0.0))
        .collect())
}

/// `max(0, |S| - S_max)` at the from side of each limited branch.
pub fn line_limit_magnitude(case: &GridCase, state: &SystemState) -> Result<Vec<f64>> {
    let flows = branch_flows(case, state)?;
    Ok(case
        .limited_branches()
        .map(|(k, br)| (flows[k].0.hypot(flows[k].1) - br.s_max).max(0.0))
        .collect())
}

pub fn generation_cost(case: &GridCase, p_g: &[f64]) -> Result<f64> {
    if p_g.len() != case.generators.len() {
        return Err(Error::dim("p_g", case.generators.len(), p_g.len()));
    }
    Ok(case
        .generators
        .iter()
        .zip(p_g)
        .map(|(g, &p)| g.c2 * p * p + g.c1 * p + g.c0)
        .sum())
}

#[inline]
fn excess(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(0.0) + (x - hi).max(0.0)
}

pub fn box_residuals(case: &GridCase, state: &SystemState) -> Result<BoxResiduals> {
    state.check_dims(case)?;
    Ok(BoxResiduals {
        v: case
            .buses
            .iter()
            .zip(&state.v)
            .map(|(b, &x)| excess(x, b.v_min, b.v_max))
            .collect(),
        theta: case
            .buses
            .iter()
            .zip(&state.theta)
            .map(|(b, &x)| excess(x, b.theta_min, b.theta_max))
            .collect(),
        p_g: case
            .generators
            .iter()
            .zip(&state.p_g)
            .map(|(g, &x)| excess(x, g.p_min, g.p_max))
            .collect(),
        q_g: case
            .generators
            .iter()
            .zip(&state.q_g)
            .map(|(g, &x)| excess(x, g.q_min, g.q_max))
            .collect(),
    })
}

pub fn full_residuals(
    case: &GridCase,
    demand: &Demand,
    state: &SystemState,
    opts: PhysicsOptions,
) -> Result<ResidualSet> {
    let (r_p, r_q) = power_balance_residuals(case, demand, state, opts)?;
    Ok(ResidualSet {
        r_p,
        r_q,
        h_line: line_limit_residuals(case, state)?,
        line_magnitude: line_limit_magnitude(case, state)?,
        boxes: box_residuals(case, state)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::grid::{Branch, Bus, BusType, Generator, Load};

    fn bus(index: usize, t: BusType) -> Bus {
        Bus {
            index,
            v_min: 0.9,
            v_max: 1.1,
            theta_min: -1.0,
            theta_max: 1.0,
            bus_type: t,
        }
    }

    fn gen(bus: usize, c: (f64, f64, f64)) -> Generator {
        Generator {
            bus,
            p_min: 0.0,
            p_max: 3.0,
            q_min: -3.0,
            q_max: 3.0,
            c2: c.0,
            c1: c.1,
            c0: c.2,
        }
    }

    fn two_bus(s_max: f64) -> GridCase {
        GridCase {
            case_id: "t2".into(),
            base_mva: 100.0,
            buses: vec![bus(0, BusType::Slack), bus(1, BusType::Pq)],
            generators: vec![gen(0, (0.0, 0.0, 0.0))],
            loads: vec![Load {
                bus: 1,
                p_d: 0.0,
                q_d: 0.0,
            }],
            shunts: vec![],
            branches: vec![Branch {
                from_bus: 0,
                to_bus: 1,
                g: 2.0,
                b: -10.0,
                s_max,
            }],
        }
    }

    #[test]
    fn branch_flow_identical_voltages_lossless_angle() {
        assert_eq!(branch_flow(1.0, 1.0, 0.0, 1.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn branch_flow_point_value() {
        // Frozen from a 30-digit evaluation of the flow formulas (mpmath).
        let (p, q) = branch_flow(1.05, 1.0, 0.1, 2.0, -10.0);
        assert!((p - 1.163_742_127_707_841_5).abs() < 1e-12, "{p}");
        assert!((q - 0.367_806_089_622_390_3).abs() < 1e-12, "{q}");
    }

    #[test]
    fn two_bus_balanced_by_construction() {
        // Slack at bus 0 supplies exactly the from-side flow; the load at
        // bus 1 absorbs the to-side arrival.
        let mut case = two_bus(0.0);
        let (v0, v1, th) = (1.05, 1.0, 0.1);
        let (p01, q01) = branch_flow(v0, v1, th, 2.0, -10.0);
        let (p10, q10) = branch_flow(v1, v0, -th, 2.0, -10.0);
        case.loads[0].p_d = -p10;
        case.loads[0].q_d = -q10;
        let state = SystemState {
            v: vec![v0, v1],
            theta: vec![th, 0.0],
            p_g: vec![p01],
            q_g: vec![q01],
        };
        let (rp, rq) =
            power_balance_residuals(&case, &Demand::base(&case), &state, PhysicsOptions::default())
                .unwrap();
        for r in rp.iter().chain(&rq) {
            assert!(r.abs() <= 1e-9, "{r}");
        }
    }

    #[test]
    fn isolated_bus_balance() {
        let case = GridCase {
            case_id: "iso".into(),
            base_mva: 100.0,
            buses: vec![bus(0, BusType::Slack)],
            generators: vec![gen(0, (0.0, 0.0, 0.0))],
            loads: vec![Load {
                bus: 0,
                p_d: 0.7,
                q_d: 0.2,
            }],
            shunts: vec![],
            branches: vec![],
        };
        let state = SystemState {
            v: vec![1.0],
            theta: vec![0.0],
            p_g: vec![0.7],
            q_g: vec![0.2],
        };
        let (rp, rq) =
            power_balance_residuals(&case, &Demand::base(&case), &state, PhysicsOptions::default())
                .unwrap();
        assert_eq!((rp[0], rq[0]), (0.0, 0.0));
    }

    #[test]
    fn perturbing_generation_shifts_only_its_bus() {
        let case = two_bus(0.0);
        let demand = Demand::base(&case);
        let state = SystemState {
            v: vec![1.02, 0.98],
            theta: vec![0.0, -0.05],
            p_g: vec![0.4],
            q_g: vec![0.1],
        };
        let (rp, rq) = power_balance_residuals(&case, &demand, &state, Default::default()).unwrap();
        let mut bumped = state.clone();
        bumped.p_g[0] += 0.05;
        let (rp2, rq2) =
            power_balance_residuals(&case, &demand, &bumped, Default::default()).unwrap();
        assert!((rp2[0] - rp[0] - 0.05).abs() < 1e-15);
        assert_eq!(rp2[1], rp[1]);
        assert_eq!(rq2, rq);
    }

    #[test]
    fn zero_state_residual_is_minus_demand() {
        let mut case = two_bus(0.0);
        case.loads[0].p_d = 0.6;
        case.loads[0].q_d = 0.3;
        let state = SystemState::flat(&case);
        let (rp, rq) =
            power_balance_residuals(&case, &Demand::base(&case), &state, Default::default())
                .unwrap();
        assert_eq!(rp, vec![0.0, -0.6]);
        assert_eq!(rq, vec![0.0, -0.3]);
    }

    #[test]
    fn shunt_terms_follow_the_flag() {
        let mut case = two_bus(0.0);
        case.shunts.push(crate::grid::Shunt {
            bus: 1,
            g_s: 0.1,
            b_s: 0.3,
        });
        let mut state = SystemState::flat(&case);
        state.v[1] = 1.1;
        let d = Demand::base(&case);
        let (on_p, on_q) = power_balance_residuals(&case, &d, &state, Default::default()).unwrap();
        let off = PhysicsOptions {
            include_shunts: false,
        };
        let (off_p, off_q) = power_balance_residuals(&case, &d, &state, off).unwrap();
        assert!((off_p[1] - on_p[1] - 1.21 * 0.1).abs() < 1e-15);
        assert!((on_q[1] - off_q[1] - 1.21 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn line_surplus_examples() {
        assert_eq!(line_surplus(0.8, 0.6, 1.0).max(0.0), 0.0);
        assert!((line_surplus(1.0, 0.0, 0.8).max(0.0) - 0.36).abs() < 1e-15);
        assert_eq!(line_surplus(0.1, 0.1, 1.0).max(0.0), 0.0);
    }

    #[test]
    fn unlimited_lines_are_excluded() {
        let case = two_bus(0.0);
        let state = SystemState {
            v: vec![1.1, 0.9],
            theta: vec![0.5, -0.5],
            p_g: vec![0.0],
            q_g: vec![0.0],
        };
        assert!(line_limit_residuals(&case, &state).unwrap().is_empty());
        let limited = two_bus(0.1);
        let h = line_limit_residuals(&limited, &state).unwrap();
        let (p, q) = branch_flow(1.1, 0.9, 1.0, 2.0, -10.0);
        assert_eq!(h, vec![p * p + q * q - 0.01]);
    }

    #[test]
    fn generation_cost_examples() {
        let mut case = two_bus(0.0);
        assert_eq!(generation_cost(&case, &[1.3]).unwrap(), 0.0);
        case.generators[0] = gen(0, (1.0, 2.0, 3.0));
        assert_eq!(generation_cost(&case, &[2.0]).unwrap(), 11.0);
        let single = generation_cost(&case, &[0.7]).unwrap();
        case.generators.push(case.generators[0].clone());
        assert_eq!(generation_cost(&case, &[0.7, 0.7]).unwrap(), 2.0 * single);
        assert!(matches!(
            generation_cost(&case, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn box_residual_examples() {
        let case = two_bus(0.0);
        let mut state = SystemState::flat(&case);
        state.v = vec![0.9, 1.1 + 0.02];
        let b = box_residuals(&case, &state).unwrap();
        assert_eq!(b.v[0], 0.0);
        assert!((b.v[1] - 0.02).abs() < 1e-15);
        assert_eq!(b.theta, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let case = two_bus(0.0);
        let mut state = SystemState::flat(&case);
        state.q_g.push(0.0);
        match full_residuals(&case, &Demand::base(&case), &state, Default::default()) {
            Err(Error::DimensionMismatch { field, .. }) => assert_eq!(field, "q_g"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn lossless_flow_is_antisymmetric(vi in 0.8f64..1.2, vj in 0.8f64..1.2, th in -1.0f64..1.0, b in -20.0f64..-0.1) {
            let (p_ij, _) = branch_flow(vi, vj, th, 0.0, b);
            let (p_ji, _) = branch_flow(vj, vi, -th, 0.0, b);
            prop_assert!((p_ij + p_ji).abs() < 1e-12);
        }

        #[test]
        fn series_losses_are_nonnegative(vi in 0.8f64..1.2, vj in 0.8f64..1.2, th in -1.5f64..1.5, g in 0.0f64..5.0, b in -20.0f64..0.0) {
            let (p_ij, _) = branch_flow(vi, vj, th, g, b);
            let (p_ji, _) = branch_flow(vj, vi, -th, g, b);
            let loss = g * (vi * vi + vj * vj - 2.0 * vi * vj * th.cos());
            prop_assert!(p_ij + p_ji >= -1e-12);
            prop_assert!((p_ij + p_ji - loss).abs() < 1e-10);
        }

        #[test]
        fn balance_is_unit_linear_in_generation_and_demand(dp in -1.0f64..1.0, dq in -1.0f64..1.0, dd in -1.0f64..1.0) {
            let case = two_bus(0.0);
            let demand = Demand::base(&case);
            let state = SystemState { v: vec![1.0, 0.97], theta: vec![0.0, -0.1], p_g: vec![0.5], q_g: vec![0.1] };
            let (rp, rq) = power_balance_residuals(&case, &demand, &state, Default::default()).unwrap();
            let mut s2 = state.clone();
            s2.p_g[0] += dp;
            s2.q_g[0] += dq;
            let mut d2 = demand.clone();
            d2.p[1] += dd;
            let (rp2, rq2) = power_balance_residuals(&case, &d2, &s2, Default::default()).unwrap();
            prop_assert!((rp2[0] - rp[0] - dp).abs() < 1e-12);
            prop_assert!((rq2[0] - rq[0] - dq).abs() < 1e-12);
            prop_assert!((rp2[1] - rp[1] + dd).abs() < 1e-12);
            // pure: repeated evaluation is bit-identical
            let again = power_balance_residuals(&case, &d2, &s2, Default::default()).unwrap();
            prop_assert_eq!(again, (rp2, rq2));
        }
    }
}
