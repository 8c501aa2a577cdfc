//! In-memory power network model and its typed graph view.
//!
//! All electrical quantities are per-unit on `base_mva`; angles are radians.
//! Bus `index` values are positions: bus `k` must sit at `buses[k]`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use gridbench_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version of the node/edge feature layout below. Checkpoints record it.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

pub const BUS_FEATURES: [&str; 5] = ["v_min", "v_max", "is_pq", "is_pv", "is_slack"];
pub const GENERATOR_FEATURES: [&str; 7] = ["p_min", "p_max", "q_min", "q_max", "c2", "c1", "c0"];
pub const LOAD_FEATURES: [&str; 2] = ["p_d", "q_d"];
pub const SHUNT_FEATURES: [&str; 2] = ["g_s", "b_s"];
pub const BRANCH_FEATURES: [&str; 3] = ["g", "b", "s_max"];

fn default_theta_min() -> f64 {
    -2.0 * PI
}

fn default_theta_max() -> f64 {
    2.0 * PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    #[serde(rename = "PQ", alias = "pq")]
    Pq,
    #[serde(rename = "PV", alias = "pv")]
    Pv,
    #[serde(rename = "slack", alias = "ref", alias = "SLACK")]
    Slack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub index: usize,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default = "default_theta_min")]
    pub theta_min: f64,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
    #[serde(rename = "type")]
    pub bus_type: BusType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub bus: usize,
    pub p_d: f64,
    pub q_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shunt {
    pub bus: usize,
    pub g_s: f64,
    pub b_s: f64,
}

/// Two-terminal series element `Y = g + jb`. `s_max == 0` means unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    #[serde(rename = "from")]
    pub from_bus: usize,
    #[serde(rename = "to")]
    pub to_bus: usize,
    pub g: f64,
    pub b: f64,
    pub s_max: f64,
}

impl Branch {
    pub fn is_limited(&self) -> bool {
        self.s_max > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCase {
    pub case_id: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub shunts: Vec<Shunt>,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionLabels {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub case_id: String,
    /// Load overrides. The k-th override on bus `b` replaces the k-th case
    /// load on `b`; overrides beyond the case's loads on `b` are appended.
    pub loads: Vec<Load>,
    pub labels: SolutionLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingKind {
    DanglingReference,
    SlackCount,
    BusIndex,
    Bounds,
    BaseMva,
    BranchSelfLoop,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

/// Every structural invariant a case violates. Empty iff the case is valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, kind: FindingKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }

    fn push(&mut self, kind: FindingKind, message: String) {
        self.findings.push(Finding { kind, message });
    }
}

impl GridCase {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_bus(&self) -> Option<usize> {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
    }

    pub fn limited_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.is_limited())
    }

    pub fn limited_branch_count(&self) -> usize {
        self.branches.iter().filter(|b| b.is_limited()).count()
    }

    /// Loads in effect for `op`, in case order followed by appended overrides.
    pub fn effective_loads(&self, op: &OperatingPoint) -> Vec<Load> {
        let mut loads = self.loads.clone();
        let mut used = vec![false; loads.len()];
        for o in &op.loads {
            let slot = loads
                .iter()
                .enumerate()
                .position(|(k, l)| l.bus == o.bus && !used[k]);
            match slot {
                Some(k) => {
                    used[k] = true;
                    loads[k].p_d = o.p_d;
                    loads[k].q_d = o.q_d;
                }
                None => loads.push(o.clone()),
            }
        }
        loads
    }

    /// Per-bus active and reactive demand for `op`.
    pub fn bus_demand(&self, op: &OperatingPoint) -> (Vec<f64>, Vec<f64>) {
        let n = self.bus_count();
        let (mut pd, mut qd) = (vec![0.0; n], vec![0.0; n]);
        for l in self.effective_loads(op) {
            pd[l.bus] += l.p_d;
            qd[l.bus] += l.q_d;
        }
        (pd, qd)
    }

    /// Base-case operating point with the given labels.
    pub fn base_point(&self, labels: SolutionLabels) -> OperatingPoint {
        OperatingPoint {
            case_id: self.case_id.clone(),
            loads: Vec::new(),
            labels,
        }
    }

    /// `k` disconnected copies of this case in one network. Slack buses of
    /// every copy after the first become PV so the result stays valid.
    pub fn replicate(&self, k: usize) -> GridCase {
        let n = self.bus_count();
        let mut out = GridCase {
            case_id: format!("{}x{}", self.case_id, k),
            base_mva: self.base_mva,
            buses: Vec::new(),
            generators: Vec::new(),
            loads: Vec::new(),
            shunts: Vec::new(),
            branches: Vec::new(),
        };
        for copy in 0..k {
            let off = copy * n;
            out.buses.extend(self.buses.iter().map(|b| Bus {
                index: b.index + off,
                bus_type: match b.bus_type {
                    BusType::Slack if copy > 0 => BusType::Pv,
                    t => t,
                },
                ..b.clone()
            }));
            out.generators.extend(self.generators.iter().map(|g| Generator {
                bus: g.bus + off,
                ..g.clone()
            }));
            out.loads.extend(self.loads.iter().map(|l| Load {
                bus: l.bus + off,
                ..l.clone()
            }));
            out.shunts.extend(self.shunts.iter().map(|s| Shunt {
                bus: s.bus + off,
                ..s.clone()
            }));
            out.branches.extend(self.branches.iter().map(|b| Branch {
                from_bus: b.from_bus + off,
                to_bus: b.to_bus + off,
                ..b.clone()
            }));
        }
        out
    }
}

impl OperatingPoint {
    /// Replicates overrides and labels to match [`GridCase::replicate`].
    pub fn replicate(&self, case: &GridCase, k: usize) -> OperatingPoint {
        let n = case.bus_count();
        let rep = |v: &[f64]| -> Vec<f64> { (0..k).flat_map(|_| v.iter().copied()).collect() };
        OperatingPoint {
            case_id: format!("{}x{}", self.case_id, k),
            loads: (0..k)
                .flat_map(|c| {
                    self.loads.iter().map(move |l| Load {
                        bus: l.bus + c * n,
                        ..l.clone()
                    })
                })
                .collect(),
            labels: SolutionLabels {
                v: rep(&self.labels.v),
                theta: rep(&self.labels.theta),
                p_g: rep(&self.labels.p_g),
                q_g: rep(&self.labels.q_g),
            },
        }
    }
}

pub fn validate_case(case: &GridCase) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = case.bus_count();

    if !(case.base_mva > 0.0) {
        report.push(
            FindingKind::BaseMva,
            format!("base_mva must be positive, got {}", case.base_mva),
        );
    }
    for (k, b) in case.buses.iter().enumerate() {
        if b.index != k {
            report.push(
                FindingKind::BusIndex,
                format!("bus at position {k} has index {}", b.index),
            );
        }
        let vals = [b.v_min, b.v_max, b.theta_min, b.theta_max];
        if vals.iter().any(|x| !x.is_finite()) {
            report.push(FindingKind::NonFinite, format!("bus {k} has non-finite bounds"));
            continue;
        }
        if !(b.v_min > 0.0) || b.v_min > b.v_max {
            report.push(
                FindingKind::Bounds,
                format!("bus {k} voltage bounds [{}, {}]", b.v_min, b.v_max),
            );
        }
        if b.theta_min > b.theta_max {
            report.push(
                FindingKind::Bounds,
                format!("bus {k} angle bounds [{}, {}]", b.theta_min, b.theta_max),
            );
        }
    }
    let slacks = case
        .buses
        .iter()
        .filter(|b| b.bus_type == BusType::Slack)
        .count();
    if slacks != 1 {
        report.push(
            FindingKind::SlackCount,
            format!("expected exactly one slack bus, found {slacks}"),
        );
    }

    let mut dangling = |component: &str, k: usize, bus: usize| {
        if bus >= n {
            report.push(
                FindingKind::DanglingReference,
                format!("{component} {k} references missing bus {bus}"),
            );
        }
    };
    for (k, g) in case.generators.iter().enumerate() {
        dangling("generator", k, g.bus);
    }
    for (k, l) in case.loads.iter().enumerate() {
        dangling("load", k, l.bus);
    }
    for (k, s) in case.shunts.iter().enumerate() {
        dangling("shunt", k, s.bus);
    }
    for (k, br) in case.branches.iter().enumerate() {
        dangling("branch", k, br.from_bus);
        dangling("branch", k, br.to_bus);
    }

    for (k, g) in case.generators.iter().enumerate() {
        let vals = [g.p_min, g.p_max, g.q_min, g.q_max, g.c2, g.c1, g.c0];
        if vals.iter().any(|x| !x.is_finite()) {
            report.push(FindingKind::NonFinite, format!("generator {k} has non-finite values"));
            continue;
        }
        if g.p_min > g.p_max || g.q_min > g.q_max {
            report.push(FindingKind::Bounds, format!("generator {k} has min > max"));
        }
        if g.c2 < 0.0 {
            report.push(FindingKind::Bounds, format!("generator {k} has c2 < 0"));
        }
    }
    for (k, l) in case.loads.iter().enumerate() {
        if !(l.p_d.is_finite() && l.q_d.is_finite()) {
            report.push(FindingKind::NonFinite, format!("load {k} is non-finite"));
        }
    }
    for (k, s) in case.shunts.iter().enumerate() {
        if !(s.g_s.is_finite() && s.b_s.is_finite()) {
            report.push(FindingKind::NonFinite, format!("shunt {k} is non-finite"));
        }
    }
    for (k, br) in case.branches.iter().enumerate() {
        if br.from_bus == br.to_bus {
            report.push(
                FindingKind::BranchSelfLoop,
                format!("branch {k} connects bus {} to itself", br.from_bus),
            );
        }
        if ![br.g, br.b, br.s_max].iter().all(|x| x.is_finite()) || br.s_max < 0.0 {
            report.push(FindingKind::NonFinite, format!("branch {k} has invalid parameters"));
        }
    }
    report
}

fn first_dangling(case: &GridCase) -> Option<Error> {
    let n = case.bus_count();
    let refs = case
        .generators
        .iter()
        .map(|g| ("generator", g.bus))
        .chain(case.loads.iter().map(|l| ("load", l.bus)))
        .chain(case.shunts.iter().map(|s| ("shunt", s.bus)))
        .chain(
            case.branches
                .iter()
                .flat_map(|b| [("branch", b.from_bus), ("branch", b.to_bus)]),
        );
    let mut counters: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (component, bus) in refs {
        let pos = counters.entry(component).or_insert(0);
        let position = if component == "branch" { *pos / 2 } else { *pos };
        *pos += 1;
        if bus >= n {
            return Some(Error::DanglingReference {
                component,
                position,
                bus,
            });
        }
    }
    None
}

/// Checks the invariants the rest of the crate relies on.
pub fn ensure_valid(case: &GridCase) -> Result<()> {
    if let Some(e) = first_dangling(case) {
        return Err(e);
    }
    let report = validate_case(case);
    if let Some(f) = report.findings.first() {
        return Err(Error::InvalidCase(f.message.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Bus,
    Generator,
    Load,
    Shunt,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [
        NodeType::Bus,
        NodeType::Generator,
        NodeType::Load,
        NodeType::Shunt,
    ];

    pub fn feature_dim(self) -> usize {
        match self {
            NodeType::Bus => BUS_FEATURES.len(),
            NodeType::Generator => GENERATOR_FEATURES.len(),
            NodeType::Load => LOAD_FEATURES.len(),
            NodeType::Shunt => SHUNT_FEATURES.len(),
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::Bus => "bus",
            NodeType::Generator => "generator",
            NodeType::Load => "load",
            NodeType::Shunt => "shunt",
        }
    }
}

/// Typed edge relations. Every link relation has a reverse; `Branch` is
/// stored in both directions under one relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Branch,
    GenLink,
    GenLinkRev,
    LoadLink,
    LoadLinkRev,
    ShuntLink,
    ShuntLinkRev,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::Branch,
        Relation::GenLink,
        Relation::GenLinkRev,
        Relation::LoadLink,
        Relation::LoadLinkRev,
        Relation::ShuntLink,
        Relation::ShuntLinkRev,
    ];

    pub fn src(self) -> NodeType {
        match self {
            Relation::Branch
            | Relation::GenLinkRev
            | Relation::LoadLinkRev
            | Relation::ShuntLinkRev => NodeType::Bus,
            Relation::GenLink => NodeType::Generator,
            Relation::LoadLink => NodeType::Load,
            Relation::ShuntLink => NodeType::Shunt,
        }
    }

    pub fn dst(self) -> NodeType {
        match self {
            Relation::Branch | Relation::GenLink | Relation::LoadLink | Relation::ShuntLink => {
                NodeType::Bus
            }
            Relation::GenLinkRev => NodeType::Generator,
            Relation::LoadLinkRev => NodeType::Load,
            Relation::ShuntLinkRev => NodeType::Shunt,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Branch => "branch",
            Relation::GenLink => "gen_link",
            Relation::GenLinkRev => "gen_link_rev",
            Relation::LoadLink => "load_link",
            Relation::LoadLinkRev => "load_link_rev",
            Relation::ShuntLink => "shunt_link",
            Relation::ShuntLinkRev => "shunt_link_rev",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }
}

/// Tensorized, typed view of one operating point. Contains no solution labels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub case_id: String,
    pub node_features: BTreeMap<NodeType, Tensor>,
    /// `(src, dst)` node positions within their respective types.
    pub edge_lists: BTreeMap<Relation, Vec<(usize, usize)>>,
    /// Per-edge features, row-aligned with `edge_lists` (branch only).
    pub edge_features: BTreeMap<Relation, Tensor>,
    /// Node position within its type -> component position in the case.
    pub index_maps: BTreeMap<NodeType, Vec<usize>>,
}

impl HeteroGraph {
    pub fn node_count(&self, t: NodeType) -> usize {
        self.node_features.get(&t).map_or(0, Tensor::rows)
    }

    pub fn total_nodes(&self) -> usize {
        NodeType::ALL.iter().map(|&t| self.node_count(t)).sum()
    }

    pub fn edges(&self, r: Relation) -> &[(usize, usize)] {
        self.edge_lists.get(&r).map_or(&[], Vec::as_slice)
    }

    pub fn features(&self, t: NodeType) -> &Tensor {
        &self.node_features[&t]
    }

    /// Undirected bus degree counting branch and component links.
    pub fn degrees(&self, t: NodeType) -> Vec<usize> {
        let mut deg = vec![0; self.node_count(t)];
        for r in Relation::ALL {
            if r.dst() == t {
                for &(_, d) in self.edges(r) {
                    deg[d] += 1;
                }
            }
        }
        deg
    }
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> Tensor {
    if rows.is_empty() {
        return Tensor::zeros(0, cols);
    }
    Tensor::from_rows(&rows).expect("uniform feature rows")
}

pub fn build_hetero_graph(case: &GridCase, op: &OperatingPoint) -> Result<HeteroGraph> {
    if op.case_id != case.case_id {
        return Err(Error::MismatchedCase {
            expected: case.case_id.clone(),
            found: op.case_id.clone(),
        });
    }
    if let Some(e) = first_dangling(case) {
        return Err(e);
    }
    let n = case.bus_count();
    if let Some((k, l)) = op.loads.iter().enumerate().find(|(_, l)| l.bus >= n) {
        return Err(Error::DanglingReference {
            component: "load override",
            position: k,
            bus: l.bus,
        });
    }

    let bus_rows = case
        .buses
        .iter()
        .map(|b| {
            let hot = |t| if b.bus_type == t { 1.0 } else { 0.0 };
            vec![
                b.v_min,
                b.v_max,
                hot(BusType::Pq),
                hot(BusType::Pv),
                hot(BusType::Slack),
            ]
        })
        .collect();
    let gen_rows = case
        .generators
        .iter()
        .map(|g| vec![g.p_min, g.p_max, g.q_min, g.q_max, g.c2, g.c1, g.c0])
        .collect();
    let loads = case.effective_loads(op);
    let load_rows = loads.iter().map(|l| vec![l.p_d, l.q_d]).collect();
    let shunt_rows = case.shunts.iter().map(|s| vec![s.g_s, s.b_s]).collect();

    let mut node_features = BTreeMap::new();
    node_features.insert(NodeType::Bus, matrix(bus_rows, BUS_FEATURES.len()));
    node_features.insert(NodeType::Generator, matrix(gen_rows, GENERATOR_FEATURES.len()));
    node_features.insert(NodeType::Load, matrix(load_rows, LOAD_FEATURES.len()));
    node_features.insert(NodeType::Shunt, matrix(shunt_rows, SHUNT_FEATURES.len()));

    let mut edge_lists: BTreeMap<Relation, Vec<(usize, usize)>> =
        Relation::ALL.iter().map(|&r| (r, Vec::new())).collect();
    let mut branch_feats = Vec::with_capacity(case.branches.len() * 2);
    for br in &case.branches {
        let e = edge_lists.get_mut(&Relation::Branch).expect("relation present");
        e.push((br.from_bus, br.to_bus));
        e.push((br.to_bus, br.from_bus));
        branch_feats.push(vec![br.g, br.b, br.s_max]);
        branch_feats.push(vec![br.g, br.b, br.s_max]);
    }
    let mut link = |fwd: Relation, rev: Relation, buses: &mut dyn Iterator<Item = usize>| {
        for (k, bus) in buses.enumerate() {
            edge_lists.get_mut(&fwd).expect("relation present").push((k, bus));
            edge_lists.get_mut(&rev).expect("relation present").push((bus, k));
        }
    };
    link(
        Relation::GenLink,
        Relation::GenLinkRev,
        &mut case.generators.iter().map(|g| g.bus),
    );
    link(
        Relation::LoadLink,
        Relation::LoadLinkRev,
        &mut loads.iter().map(|l| l.bus),
    );
    link(
        Relation::ShuntLink,
        Relation::ShuntLinkRev,
        &mut case.shunts.iter().map(|s| s.bus),
    );

    let mut edge_features = BTreeMap::new();
    edge_features.insert(Relation::Branch, matrix(branch_feats, BRANCH_FEATURES.len()));

    let mut index_maps = BTreeMap::new();
    index_maps.insert(NodeType::Bus, (0..n).collect());
    index_maps.insert(NodeType::Generator, (0..case.generators.len()).collect());
    index_maps.insert(NodeType::Load, (0..loads.len()).collect());
    index_maps.insert(NodeType::Shunt, (0..case.shunts.len()).collect());

    Ok(HeteroGraph {
        case_id: case.case_id.clone(),
        node_features,
        edge_lists,
        edge_features,
        index_maps,
    })
}

/// Relabeling of every component list of a case.
#[derive(Debug, Clone, PartialEq)]
pub struct CasePermutation {
    /// `bus[old] = new`.
    pub bus: Vec<usize>,
    /// `generator[new] = old` (reordering of the list).
    pub generator: Vec<usize>,
    pub load: Vec<usize>,
    pub shunt: Vec<usize>,
    pub branch: Vec<usize>,
}

/// Applies `perm` to a case whose operating point carries no load overrides,
/// relabeling the solution consistently.
pub fn permute_case(
    case: &GridCase,
    op: &OperatingPoint,
    perm: &CasePermutation,
) -> (GridCase, OperatingPoint) {
    let n = case.bus_count();
    let mut buses = vec![case.buses[0].clone(); n];
    for (old, b) in case.buses.iter().enumerate() {
        let new = perm.bus[old];
        buses[new] = Bus {
            index: new,
            ..b.clone()
        };
    }
    let generators = perm
        .generator
        .iter()
        .map(|&old| Generator {
            bus: perm.bus[case.generators[old].bus],
            ..case.generators[old].clone()
        })
        .collect();
    let eff = case.effective_loads(op);
    let loads = perm
        .load
        .iter()
        .map(|&old| Load {
            bus: perm.bus[eff[old].bus],
            ..eff[old].clone()
        })
        .collect();
    let shunts = perm
        .shunt
        .iter()
        .map(|&old| Shunt {
            bus: perm.bus[case.shunts[old].bus],
            ..case.shunts[old].clone()
        })
        .collect();
    let branches = perm
        .branch
        .iter()
        .map(|&old| {
            let b = &case.branches[old];
            Branch {
                from_bus: perm.bus[b.from_bus],
                to_bus: perm.bus[b.to_bus],
                ..b.clone()
            }
        })
        .collect();
    let mut v = vec![0.0; n];
    let mut theta = vec![0.0; n];
    for old in 0..n {
        v[perm.bus[old]] = op.labels.v[old];
        theta[perm.bus[old]] = op.labels.theta[old];
    }
    let p_g = perm.generator.iter().map(|&o| op.labels.p_g[o]).collect();
    let q_g = perm.generator.iter().map(|&o| op.labels.q_g[o]).collect();
    let new_case = GridCase {
        case_id: case.case_id.clone(),
        base_mva: case.base_mva,
        buses,
        generators,
        loads,
        shunts,
        branches,
    };
    let new_op = OperatingPoint {
        case_id: case.case_id.clone(),
        loads: Vec::new(),
        labels: SolutionLabels { v, theta, p_g, q_g },
    };
    (new_case, new_op)
}
