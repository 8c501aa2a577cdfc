//! Small hand-built cases for unit tests.

use crate::grid::*;

pub(crate) fn case4() -> GridCase {
    let bus = |index, bus_type| Bus {
        index,
        v_min: 0.94,
        v_max: 1.06,
        theta_min: -0.5,
        theta_max: 0.5,
        bus_type,
    };
    let gen = |bus, p_max| Generator {
        bus,
        p_min: 0.0,
        p_max,
        q_min: -0.8,
        q_max: 0.8,
        c2: 0.2,
        c1: 1.5,
        c0: 0.1,
    };
    let br = |from_bus, to_bus, g, b, s_max| Branch { from_bus, to_bus, g, b, s_max };
    GridCase {
        case_id: "t4".into(),
        base_mva: 100.0,
        buses: vec![
            bus(0, BusType::Slack),
            bus(1, BusType::Pv),
            bus(2, BusType::Pq),
            bus(3, BusType::Pq),
        ],
        generators: vec![gen(0, 2.0), gen(1, 1.0)],
        loads: vec![
            Load { bus: 2, p_d: 0.6, q_d: 0.2 },
            Load { bus: 3, p_d: 0.4, q_d: 0.1 },
        ],
        shunts: vec![Shunt { bus: 3, g_s: 0.01, b_s: 0.05 }],
        branches: vec![
            br(0, 1, 1.2, -8.0, 1.5),
            br(1, 2, 1.0, -6.0, 0.0),
            br(2, 3, 0.8, -5.0, 0.9),
            br(3, 0, 1.1, -7.0, 1.2),
            br(0, 2, 0.5, -3.0, 0.0),
        ],
    }
}

/// `k` operating points with scaled loads and made-up (not power-flow
/// consistent) labels.
pub(crate) fn points4(case: &GridCase, k: usize) -> Vec<OperatingPoint> {
    (0..k)
        .map(|s| {
            let f = 0.8 + 0.4 * s as f64 / k.max(1) as f64;
            OperatingPoint {
                case_id: case.case_id.clone(),
                loads: case
                    .loads
                    .iter()
                    .map(|l| Load { p_d: l.p_d * f, q_d: l.q_d * f, ..l.clone() })
                    .collect(),
                labels: SolutionLabels {
                    v: vec![1.02, 1.01, 0.98 - 0.01 * f, 0.99],
                    theta: vec![0.0, -0.02 * f, -0.06 * f, -0.04 * f],
                    p_g: vec![0.7 * f, 0.35 * f],
                    q_g: vec![0.2 * f, 0.1],
                },
            }
        })
        .collect()
}
