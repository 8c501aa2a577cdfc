//! Small synthetic grids with solved operating points.
//!
//! Labels come from a Newton-Raphson power-flow solve written directly
//! against the series-element flow formulas. Nothing here calls into
//! `gridbench::physics`, so the physics residuals can be tested against it.

use std::f64::consts::PI;

use gridbench::grid::{
    Branch, Bus, BusType, Generator, GridCase, Load, OperatingPoint, Shunt, SolutionLabels,
};
use rand_core::{RngCore, SeedableRng};
use rand_pcg::Pcg32;

mod newton;

pub use newton::{solve_power_flow, PfError, PfProblem, PfSolution};

struct Draw(Pcg32);

impl Draw {
    fn new(seed: u64) -> Self {
        Draw(Pcg32::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
}

/// Parameters of a synthetic family: one fixed topology, many load draws.
#[derive(Debug, Clone)]
pub struct FamilySpec {
    pub case_id: String,
    pub buses: usize,
    pub samples: usize,
    /// Loads are scaled by a factor drawn from `[1 - spread, 1 + spread]`.
    pub load_spread: f64,
    pub with_shunt: bool,
    pub seed: u64,
}

impl FamilySpec {
    pub fn new(case_id: &str, buses: usize, samples: usize, seed: u64) -> Self {
        Self {
            case_id: case_id.to_string(),
            buses,
            samples,
            load_spread: 0.3,
            with_shunt: buses >= 3,
            seed,
        }
    }
}

/// The fixed structure of a family before bounds are fitted to its samples.
struct Skeleton {
    types: Vec<BusType>,
    branches: Vec<(usize, usize, f64, f64)>,
    gen_buses: Vec<usize>,
    /// Share of total active demand dispatched to each non-slack generator.
    shares: Vec<f64>,
    v_set: Vec<f64>,
    base_loads: Vec<(usize, f64, f64)>,
    shunts: Vec<(usize, f64, f64)>,
    costs: Vec<(f64, f64, f64)>,
}

fn skeleton(spec: &FamilySpec, rng: &mut Draw) -> Skeleton {
    let n = spec.buses;
    assert!(n >= 2, "a family needs at least two buses");
    let mut types = vec![BusType::Pq; n];
    types[0] = BusType::Slack;
    if n >= 3 {
        types[1] = BusType::Pv;
    }
    if n >= 5 {
        types[3] = BusType::Pv;
    }
    // A spanning chain keeps every family connected; extra chords add loops.
    let mut branches = Vec::new();
    for k in 1..n {
        let from = if k == 1 { 0 } else { rng.below(k) };
        branches.push((from, k, rng.range(1.0, 3.0), rng.range(-12.0, -6.0)));
    }
    if n >= 3 {
        branches.push((0, n - 1, rng.range(1.0, 3.0), rng.range(-12.0, -6.0)));
    }
    branches.dedup_by(|a, b| (a.0, a.1) == (b.0, b.1));

    let gen_buses: Vec<usize> = (0..n).filter(|&i| types[i] != BusType::Pq).collect();
    let shares = gen_buses[1..].iter().map(|_| rng.range(0.2, 0.4)).collect();
    let v_set = (0..n)
        .map(|i| match types[i] {
            BusType::Slack => 1.03,
            BusType::Pv => rng.range(1.0, 1.03),
            BusType::Pq => 1.0,
        })
        .collect();
    let mut base_loads = Vec::new();
    for i in 1..n {
        let p: f64 = if types[i] == BusType::Pq {
            rng.range(0.4, 0.9)
        } else {
            rng.range(0.1, 0.3)
        };
        base_loads.push((i, p, p * rng.range(0.2, 0.4)));
    }
    let shunts = if spec.with_shunt {
        vec![(n - 1, rng.range(0.0, 0.02), rng.range(0.02, 0.08))]
    } else {
        Vec::new()
    };
    let costs = gen_buses
        .iter()
        .map(|_| (rng.range(0.05, 0.2), rng.range(1.0, 2.0), rng.range(0.0, 0.1)))
        .collect();
    Skeleton {
        types,
        branches,
        gen_buses,
        shares,
        v_set,
        base_loads,
        shunts,
        costs,
    }
}

fn solve_sample(sk: &Skeleton, loads: &[(usize, f64, f64)]) -> Result<SolutionLabels, PfError> {
    let n = sk.types.len();
    let total_pd: f64 = loads.iter().map(|l| l.1).sum();
    let mut p_gen_spec = vec![0.0; n];
    for (k, &bus) in sk.gen_buses[1..].iter().enumerate() {
        p_gen_spec[bus] = sk.shares[k] * total_pd;
    }
    let mut pd = vec![0.0; n];
    let mut qd = vec![0.0; n];
    for &(bus, p, q) in loads {
        pd[bus] += p;
        qd[bus] += q;
    }
    let problem = PfProblem {
        types: sk.types.clone(),
        branches: sk.branches.clone(),
        shunts: sk.shunts.clone(),
        p_spec: (0..n).map(|i| p_gen_spec[i] - pd[i]).collect(),
        q_spec: (0..n).map(|i| -qd[i]).collect(),
        v_set: sk.v_set.clone(),
    };
    let sol = solve_power_flow(&problem)?;
    // Generator outputs: scheduled P on PV units, the slack takes the rest;
    // every generator supplies its bus's reactive mismatch.
    let p_g = sk
        .gen_buses
        .iter()
        .map(|&b| sol.p_inj[b] + pd[b])
        .collect();
    let q_g = sk
        .gen_buses
        .iter()
        .map(|&b| sol.q_inj[b] + qd[b])
        .collect();
    Ok(SolutionLabels {
        v: sol.v,
        theta: sol.theta,
        p_g,
        q_g,
    })
}

fn cover(lo_default: f64, hi_default: f64, xs: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (lo_default, hi_default);
    for x in xs {
        lo = lo.min(x - pad);
        hi = hi.max(x + pad);
    }
    (lo, hi)
}

/// A solved family: the case (bounds fitted to cover every label, thermal
/// limits 2% above the largest observed flow) and its operating points.
pub fn family(spec: &FamilySpec) -> (GridCase, Vec<OperatingPoint>) {
    let mut rng = Draw::new(spec.seed ^ 0x5eed_0000_0000_0000 ^ spec.buses as u64);
    let sk = skeleton(spec, &mut rng);
    let n = spec.buses;

    let mut samples: Vec<(Vec<(usize, f64, f64)>, SolutionLabels)> = Vec::new();
    let mut attempts = 0;
    while samples.len() < spec.samples {
        attempts += 1;
        assert!(attempts < spec.samples * 10 + 100, "power flow keeps failing");
        let loads: Vec<(usize, f64, f64)> = sk
            .base_loads
            .iter()
            .map(|&(bus, p, q)| {
                let s = rng.range(1.0 - spec.load_spread, 1.0 + spec.load_spread);
                let t = rng.range(0.9, 1.1);
                (bus, p * s, q * s * t)
            })
            .collect();
        if let Ok(labels) = solve_sample(&sk, &loads) {
            samples.push((loads, labels));
        }
    }

    let pad = 0.01;
    let buses = (0..n)
        .map(|i| {
            let (v_min, v_max) = cover(0.94, 1.06, samples.iter().map(|s| s.1.v[i]), pad);
            let (theta_min, theta_max) = if sk.types[i] == BusType::Slack {
                (-PI / 6.0, PI / 6.0)
            } else {
                cover(-PI / 6.0, PI / 6.0, samples.iter().map(|s| s.1.theta[i]), pad)
            };
            Bus {
                index: i,
                v_min,
                v_max,
                theta_min,
                theta_max,
                bus_type: sk.types[i],
            }
        })
        .collect();
    let generators = sk
        .gen_buses
        .iter()
        .enumerate()
        .map(|(k, &bus)| {
            let (p_min, p_max) = cover(0.0, 0.0, samples.iter().map(|s| s.1.p_g[k]), 0.0);
            let (q_min, q_max) = cover(0.0, 0.0, samples.iter().map(|s| s.1.q_g[k]), 0.0);
            let (c2, c1, c0) = sk.costs[k];
            Generator {
                bus,
                p_min: p_min.min(0.0),
                p_max: p_max * 1.2 + 0.05,
                q_min: q_min * 1.2 - 0.05,
                q_max: q_max * 1.2 + 0.05,
                c2,
                c1,
                c0,
            }
        })
        .collect();
    let mut branches: Vec<Branch> = sk
        .branches
        .iter()
        .map(|&(from_bus, to_bus, g, b)| Branch {
            from_bus,
            to_bus,
            g,
            b,
            s_max: 0.0,
        })
        .collect();
    for br in &mut branches {
        let worst = samples
            .iter()
            .map(|(_, l)| {
                let (p, q) = newton::flow(
                    l.v[br.from_bus],
                    l.v[br.to_bus],
                    l.theta[br.from_bus] - l.theta[br.to_bus],
                    br.g,
                    br.b,
                );
                p.hypot(q)
            })
            .fold(0.0, f64::max);
        br.s_max = worst * 1.02;
    }

    let case = GridCase {
        case_id: spec.case_id.clone(),
        base_mva: 100.0,
        buses,
        generators,
        loads: sk
            .base_loads
            .iter()
            .map(|&(bus, p_d, q_d)| Load { bus, p_d, q_d })
            .collect(),
        shunts: sk
            .shunts
            .iter()
            .map(|&(bus, g_s, b_s)| Shunt { bus, g_s, b_s })
            .collect(),
        branches,
    };
    let ops = samples
        .into_iter()
        .map(|(loads, labels)| OperatingPoint {
            case_id: spec.case_id.clone(),
            loads: loads
                .into_iter()
                .map(|(bus, p_d, q_d)| Load { bus, p_d, q_d })
                .collect(),
            labels,
        })
        .collect();
    (case, ops)
}

pub fn two_bus_family(samples: usize, seed: u64) -> (GridCase, Vec<OperatingPoint>) {
    family(&FamilySpec::new("syn2", 2, samples, seed))
}

pub fn three_bus_family(samples: usize, seed: u64) -> (GridCase, Vec<OperatingPoint>) {
    family(&FamilySpec::new("syn3", 3, samples, seed))
}

/// Independent solved cases, one sample each, cycling through 2..=5 buses.
pub fn solved_cases(count: usize, seed: u64) -> Vec<(GridCase, OperatingPoint)> {
    (0..count)
        .map(|k| {
            let buses = 2 + k % 4;
            let spec = FamilySpec::new(&format!("solved{k}"), buses, 1, seed.wrapping_add(k as u64));
            let (case, mut ops) = family(&spec);
            (case, ops.remove(0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_deterministic() {
        let a = three_bus_family(5, 3);
        let b = three_bus_family(5, 3);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.1, three_bus_family(5, 4).1);
    }

    #[test]
    fn labels_sit_inside_bounds() {
        for buses in 2..=5 {
            let (case, ops) = family(&FamilySpec::new("f", buses, 20, 11));
            for op in &ops {
                for (i, b) in case.buses.iter().enumerate() {
                    assert!(b.v_min <= op.labels.v[i] && op.labels.v[i] <= b.v_max);
                    assert!(b.theta_min <= op.labels.theta[i] && op.labels.theta[i] <= b.theta_max);
                }
                for (k, g) in case.generators.iter().enumerate() {
                    assert!(g.p_min <= op.labels.p_g[k] && op.labels.p_g[k] <= g.p_max);
                    assert!(g.q_min <= op.labels.q_g[k] && op.labels.q_g[k] <= g.q_max);
                }
            }
            assert_eq!(op_slack_theta(&case, &ops), 0.0);
        }
    }

    fn op_slack_theta(case: &GridCase, ops: &[OperatingPoint]) -> f64 {
        let s = case.slack_bus().unwrap();
        ops.iter().map(|o| o.labels.theta[s].abs()).fold(0.0, f64::max)
    }
}
