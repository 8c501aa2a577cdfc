use std::collections::BTreeMap;
use std::rc::Rc;

use gridbench_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::grid::{
    build_hetero_graph, BusType, GridCase, HeteroGraph, NodeType, OperatingPoint, Relation,
};

/// Width of the flattened node feature vector: bus 5 | generator 7 |
/// load 2 | shunt 2 | node-type one-hot 4.
pub const FLAT_FEATURES: usize = 20;

const SLOT_OFFSET: [usize; 4] = [0, 5, 12, 14];
const ONE_HOT_OFFSET: usize = 16;

/// Structure of one typed relation as dense matrices (dst rows, src cols).
#[derive(Debug, Clone)]
pub struct RelationMatrices {
    pub src: NodeType,
    pub dst: NodeType,
    /// Row-normalized adjacency. Rows without neighbors are zero.
    pub mean: Tensor,
    /// `true` where there is no edge.
    pub blocked: Rc<[bool]>,
}

/// Everything about a topology that does not change between samples.
#[derive(Debug, Clone)]
pub struct Topology {
    pub case_id: String,
    pub counts: [usize; 4],
    pub offsets: [usize; 4],
    pub n_flat: usize,
    /// `D^-1/2 (A + I) D^-1/2` over the flattened graph.
    pub gcn_norm: Tensor,
    /// Plain adjacency counts over the flattened graph, no self-loops.
    pub adjacency: Tensor,
    /// Attention support with self-loops (`true` = blocked).
    pub attn_blocked: Rc<[bool]>,
    pub relations: BTreeMap<Relation, RelationMatrices>,
    pub edges: BTreeMap<Relation, Vec<(usize, usize)>>,
    pub head: HeadBounds,
}

/// Box bounds used by the prediction head, as column tensors.
#[derive(Debug, Clone)]
pub struct HeadBounds {
    pub v_lo: Rc<Tensor>,
    pub v_hi: Rc<Tensor>,
    pub theta_lo: Rc<Tensor>,
    pub theta_hi: Rc<Tensor>,
    pub pg_lo: Rc<Tensor>,
    pub pg_hi: Rc<Tensor>,
    pub qg_lo: Rc<Tensor>,
    pub qg_hi: Rc<Tensor>,
    /// 0 at the slack bus, 1 elsewhere.
    pub theta_mask: Tensor,
}

fn head_bounds(case: &GridCase) -> Result<HeadBounds> {
    let col = |xs: Vec<f64>| Rc::new(Tensor::column(xs));
    let check = |what: &str, lo: f64, hi: f64| -> Result<()> {
        if lo.is_finite() && hi.is_finite() && lo <= hi {
            Ok(())
        } else {
            Err(Error::MissingBounds(format!("{what}: [{lo}, {hi}]")))
        }
    };
    for (k, b) in case.buses.iter().enumerate() {
        check(&format!("bus {k} voltage"), b.v_min, b.v_max)?;
        check(&format!("bus {k} angle"), b.theta_min, b.theta_max)?;
    }
    for (k, g) in case.generators.iter().enumerate() {
        check(&format!("generator {k} p"), g.p_min, g.p_max)?;
        check(&format!("generator {k} q"), g.q_min, g.q_max)?;
    }
    Ok(HeadBounds {
        v_lo: col(case.buses.iter().map(|b| b.v_min).collect()),
        v_hi: col(case.buses.iter().map(|b| b.v_max).collect()),
        theta_lo: col(case.buses.iter().map(|b| b.theta_min).collect()),
        theta_hi: col(case.buses.iter().map(|b| b.theta_max).collect()),
        pg_lo: col(case.generators.iter().map(|g| g.p_min).collect()),
        pg_hi: col(case.generators.iter().map(|g| g.p_max).collect()),
        qg_lo: col(case.generators.iter().map(|g| g.q_min).collect()),
        qg_hi: col(case.generators.iter().map(|g| g.q_max).collect()),
        theta_mask: Tensor::column(
            case.buses
                .iter()
                .map(|b| if b.bus_type == BusType::Slack { 0.0 } else { 1.0 })
                .collect(),
        ),
    })
}

impl Topology {
    /// Structure of `graph`; `case` supplies the output bounds.
    pub fn new(case: &GridCase, graph: &HeteroGraph) -> Result<Self> {
        let mut counts = [0; 4];
        for t in NodeType::ALL {
            counts[t.position()] = graph.node_count(t);
        }
        let mut offsets = [0; 4];
        for k in 1..4 {
            offsets[k] = offsets[k - 1] + counts[k - 1];
        }
        let n = offsets[3] + counts[3];

        let mut adjacency = Tensor::zeros(n, n);
        let mut relations = BTreeMap::new();
        for r in Relation::ALL {
            let (src, dst) = (r.src(), r.dst());
            let (ns, nd) = (counts[src.position()], counts[dst.position()]);
            let mut count = Tensor::zeros(nd, ns);
            for &(s, d) in graph.edges(r) {
                count.set(d, s, count.get(d, s) + 1.0);
                let (fs, fd) = (offsets[src.position()] + s, offsets[dst.position()] + d);
                adjacency.set(fd, fs, adjacency.get(fd, fs) + 1.0);
            }
            let mut mean = count.clone();
            for i in 0..nd {
                let deg: f64 = count.row_slice(i).iter().sum();
                if deg > 0.0 {
                    for j in 0..ns {
                        mean.set(i, j, count.get(i, j) / deg);
                    }
                }
            }
            let blocked: Rc<[bool]> = count.data().iter().map(|&c| c == 0.0).collect();
            relations.insert(
                r,
                RelationMatrices {
                    src,
                    dst,
                    mean,
                    blocked,
                },
            );
        }

        let mut tilde = adjacency.clone();
        for i in 0..n {
            tilde.set(i, i, tilde.get(i, i) + 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| tilde.row_slice(i).iter().sum()).collect();
        let mut gcn_norm = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let a = tilde.get(i, j);
                if a != 0.0 {
                    gcn_norm.set(i, j, a / (deg[i] * deg[j]).sqrt());
                }
            }
        }
        let attn_blocked: Rc<[bool]> = tilde.data().iter().map(|&a| a == 0.0).collect();

        Ok(Self {
            case_id: graph.case_id.clone(),
            counts,
            offsets,
            n_flat: n,
            gcn_norm,
            adjacency,
            attn_blocked,
            relations,
            edges: graph.edge_lists.clone(),
            head: head_bounds(case)?,
        })
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.counts[t.position()]
    }

    /// Flattened-view row indices of the nodes of type `t`.
    pub fn flat_rows(&self, t: NodeType) -> Vec<usize> {
        let o = self.offsets[t.position()];
        (o..o + self.count(t)).collect()
    }

    /// Whether `graph` has the same node counts and edges as this topology.
    pub fn matches(&self, graph: &HeteroGraph) -> bool {
        NodeType::ALL
            .iter()
            .all(|&t| graph.node_count(t) == self.count(t))
            && graph.edge_lists == self.edges
    }
}

/// Per-sample node features in both views.
#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub typed: BTreeMap<NodeType, Tensor>,
    pub flat: Tensor,
}

pub fn sample_inputs(graph: &HeteroGraph) -> SampleInputs {
    let n: usize = graph.total_nodes();
    let mut flat = Tensor::zeros(n, FLAT_FEATURES);
    let mut row = 0;
    for t in NodeType::ALL {
        let f = graph.features(t);
        for r in 0..f.rows() {
            for (c, &x) in f.row_slice(r).iter().enumerate() {
                flat.set(row, SLOT_OFFSET[t.position()] + c, x);
            }
            flat.set(row, ONE_HOT_OFFSET + t.position(), 1.0);
            row += 1;
        }
    }
    SampleInputs {
        typed: graph.node_features.clone(),
        flat,
    }
}

/// Graph, structure and inputs for one operating point.
pub fn prepare(case: &GridCase, op: &OperatingPoint) -> Result<(Topology, SampleInputs)> {
    let g = build_hetero_graph(case, op)?;
    Ok((Topology::new(case, &g)?, sample_inputs(&g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, Generator, Load, SolutionLabels};

    fn ring4() -> GridCase {
        let bus = |i, t| Bus {
            index: i,
            v_min: 0.9,
            v_max: 1.1,
            theta_min: -1.0,
            theta_max: 1.0,
            bus_type: t,
        };
        GridCase {
            case_id: "ring".into(),
            base_mva: 100.0,
            buses: vec![
                bus(0, BusType::Slack),
                bus(1, BusType::Pq),
                bus(2, BusType::Pq),
                bus(3, BusType::Pq),
            ],
            generators: vec![Generator {
                bus: 0,
                p_min: 0.0,
                p_max: 1.0,
                q_min: -1.0,
                q_max: 1.0,
                c2: 0.0,
                c1: 1.0,
                c0: 0.0,
            }],
            loads: vec![Load {
                bus: 2,
                p_d: 0.3,
                q_d: 0.1,
            }],
            shunts: vec![],
            branches: (0..4)
                .map(|k| Branch {
                    from_bus: k,
                    to_bus: (k + 1) % 4,
                    g: 1.0,
                    b: -5.0,
                    s_max: 0.0,
                })
                .collect(),
        }
    }

    fn labels() -> SolutionLabels {
        SolutionLabels {
            v: vec![1.0; 4],
            theta: vec![0.0; 4],
            p_g: vec![0.0],
            q_g: vec![0.0],
        }
    }

    #[test]
    fn flat_layout_and_offsets() {
        let case = ring4();
        let (topo, inputs) = prepare(&case, &case.base_point(labels())).unwrap();
        assert_eq!(topo.counts, [4, 1, 1, 0]);
        assert_eq!(topo.offsets, [0, 4, 5, 6]);
        assert_eq!(inputs.flat.shape(), (6, FLAT_FEATURES));
        // generator row: p_max in slot 5 + 1, one-hot at 16 + 1
        assert_eq!(inputs.flat.get(4, 6), 1.0);
        assert_eq!(inputs.flat.get(4, 17), 1.0);
        assert_eq!(inputs.flat.get(5, 12), 0.3);
        assert_eq!(inputs.flat.row_slice(0)[16..], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gcn_normalization_on_four_cycle() {
        let mut case = ring4();
        case.generators.clear();
        case.loads.clear();
        let op = case.base_point(SolutionLabels {
            p_g: vec![],
            q_g: vec![],
            ..labels()
        });
        let (topo, _) = prepare(&case, &op).unwrap();
        // every node has degree 2, plus the self-loop: all weights 1/3
        for i in 0..4 {
            assert!((topo.gcn_norm.get(i, i) - 1.0 / 3.0).abs() < 1e-15);
            assert!((topo.gcn_norm.get(i, (i + 1) % 4) - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(topo.gcn_norm.get(i, (i + 2) % 4), 0.0);
        }
    }

    #[test]
    fn relation_means_are_row_stochastic() {
        let case = ring4();
        let (topo, _) = prepare(&case, &case.base_point(labels())).unwrap();
        for m in topo.relations.values() {
            for i in 0..m.mean.rows() {
                let s: f64 = m.mean.row_slice(i).iter().sum();
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-15);
            }
        }
        let br = &topo.relations[&Relation::Branch];
        assert_eq!(br.mean.get(0, 1), 0.5);
    }

    #[test]
    fn infinite_bounds_are_missing() {
        let mut case = ring4();
        case.generators[0].p_max = f64::INFINITY;
        assert!(matches!(
            prepare(&case, &case.base_point(labels())),
            Err(Error::MissingBounds(_))
        ));
    }
}
