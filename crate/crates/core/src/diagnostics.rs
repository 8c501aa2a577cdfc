//! Post-hoc analyses: PCA of activations, ridge probes, the node degree vs
//! error correlation, and the violation-vs-size power-law fit.
//!
//! Nothing here touches model parameters; activations come in as plain
//! matrices.

use std::collections::{BTreeMap, VecDeque};

use gridbench_autodiff::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusType, GridCase, NodeType};
use crate::models::checkpoint::Checkpoint;
use crate::models::{prepare, Model};
use crate::physics::SystemState;
use crate::grid::SolutionLabels;
use crate::rng::{self, Rng};

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::from_vec(m.nrows(), m.ncols(), data).expect("shape")
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn centered(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Principal directions of a fitted point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k x cols`, orthonormal rows.
    pub components: Tensor,
    /// Variance fraction per component, nonincreasing.
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    /// Centers (no whitening) and eigendecomposes the sample covariance.
    pub fn fit(x: &Tensor, k: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(Error::DegenerateData(format!("PCA needs at least 2 rows, got {n}")));
        }
        let kmax = (n - 1).min(d);
        if k == 0 || k > kmax {
            return Err(Error::Config(format!("k = {k} outside 1..={kmax}")));
        }
        let m = to_matrix(x);
        let mean = column_means(&m);
        let c = centered(&m, &mean);
        let cov = (c.transpose() * &c) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let total: f64 = vals.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateData("covariance has rank 0".into()));
        }
        let mut comps = Vec::with_capacity(k * d);
        for &i in order.iter().take(k) {
            let v = eig.eigenvectors.column(i);
            // sign: largest-magnitude entry positive
            let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let s = if big < 0.0 { -1.0 } else { 1.0 };
            comps.extend(v.iter().map(|x| s * x));
        }
        Ok(Self {
            mean: mean.iter().copied().collect(),
            components: Tensor::from_vec(k, d, comps)?,
            explained_variance_ratio: vals.iter().take(k).map(|v| v / total).collect(),
        })
    }

    /// Coordinates of the rows of `x` in the component basis.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::dim("pca input columns", self.mean.len(), x.cols()));
        }
        let c = centered(&to_matrix(x), &DVector::from_vec(self.mean.clone()));
        Ok(to_tensor(&(c * to_matrix(&self.components).transpose())))
    }

    /// Maps component coordinates back to the input space.
    pub fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        let zm = to_matrix(z);
        if zm.ncols() != self.components.rows() {
            return Err(Error::dim("pca coordinates", self.components.rows(), zm.ncols()));
        }
        let mut out = zm * to_matrix(&self.components);
        let mean = DVector::from_vec(self.mean.clone());
        for mut row in out.row_iter_mut() {
            row += mean.transpose();
        }
        Ok(to_tensor(&out))
    }
}

/// PCA fitted on rows `fit_rows` and applied to the disjoint rows
/// `project_rows`.
pub fn pca(x: &Tensor, k: usize, fit_rows: &[usize], project_rows: &[usize]) -> Result<(Pca, Tensor)> {
    if fit_rows.iter().any(|r| project_rows.contains(r)) {
        return Err(Error::Config("PCA fit and projection rows overlap".into()));
    }
    let p = Pca::fit(&select_rows(x, fit_rows)?, k)?;
    let z = p.project(&select_rows(x, project_rows)?)?;
    Ok((p, z))
}

pub fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * x.cols());
    for &r in rows {
        if r >= x.rows() {
            return Err(Error::dim("row index", x.rows(), r));
        }
        data.extend_from_slice(x.row_slice(r));
    }
    Ok(Tensor::from_vec(rows.len(), x.cols(), data)?)
}

/// Seeded disjoint split of `0..n`; the first part holds `floor(n * frac)`
/// rows.
pub fn disjoint_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = Rng::new(seed, rng::stream::PROBE).permutation(n);
    let k = ((n as f64 * frac).floor() as usize).min(n);
    let (mut a, mut b) = (perm[..k].to_vec(), perm[k..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

pub const DEFAULT_PROBE_TRAIN_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub r_squared_train: f64,
    pub r_squared_heldout: f64,
    pub train_rows: usize,
    pub heldout_rows: usize,
}

fn r_squared(y: &DVector<f64>, pred: &DVector<f64>) -> Result<f64> {
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::ZeroVariance("probe target"));
    }
    let ss_res: f64 = y.iter().zip(pred.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Ridge regression `w = (X'X + lambda I)^-1 X'y` on centered train rows
/// (the intercept is not penalized), scored by R^2 on held-out rows.
pub fn linear_probe(x: &Tensor, y: &[f64], train: &[usize], heldout: &[usize], lambda: f64) -> Result<ProbeFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge lambda {lambda} must be >= 0")));
    }
    if y.len() != x.rows() {
        return Err(Error::dim("probe target", x.rows(), y.len()));
    }
    if train.iter().any(|r| heldout.contains(r)) {
        return Err(Error::Config("probe train and held-out rows overlap".into()));
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let xt = to_matrix(&select_rows(x, train)?);
    let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
    let mx = column_means(&xt);
    let my = yt.mean();
    let xc = centered(&xt, &mx);
    let yc = yt.add_scalar(-my);
    let d = xc.ncols();
    let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
    let rhs = xc.transpose() * &yc;
    let w = if lambda == 0.0 {
        let svd = gram.clone().svd(true, true);
        let tol = f64::EPSILON * d.max(1) as f64 * svd.singular_values.max().max(1.0);
        if svd.rank(tol) < d {
            return Err(Error::SingularSystem);
        }
        svd.solve(&rhs, tol).map_err(|_| Error::SingularSystem)?
    } else {
        gram.cholesky().ok_or(Error::SingularSystem)?.solve(&rhs)
    };
    let intercept = my - mx.dot(&w);
    let predict = |m: &DMatrix<f64>| (m * &w).add_scalar(intercept);
    let xh = to_matrix(&select_rows(x, heldout)?);
    let yh = DVector::from_iterator(heldout.len(), heldout.iter().map(|&i| y[i]));
    Ok(ProbeFit {
        weights: w.iter().copied().collect(),
        intercept,
        lambda,
        r_squared_train: r_squared(&yt, &predict(&xt))?,
        r_squared_heldout: r_squared(&yh, &predict(&xh))?,
        train_rows: train.len(),
        heldout_rows: heldout.len(),
    })
}

/// One-vs-rest ridge on indicator targets; returns held-out accuracy of the
/// arg-max class.
pub fn categorical_probe(x: &Tensor, labels: &[usize], train: &[usize], heldout: &[usize], lambda: f64) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::dim("probe labels", x.rows(), labels.len()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut fits = Vec::new();
    for c in 0..classes {
        let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
        if train.iter().all(|&i| y[i] == y[train[0]]) {
            // class absent (or alone) in the train rows: constant score
            fits.push((vec![0.0; x.cols()], y[train[0]]));
            continue;
        }
        let xt = to_matrix(&select_rows(x, train)?);
        let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let mx = column_means(&xt);
        let my = yt.mean();
        let xc = centered(&xt, &mx);
        let d = xc.ncols();
        let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda.max(1e-12);
        let w = gram.cholesky().ok_or(Error::SingularSystem)?.solve(&(xc.transpose() * yt.add_scalar(-my)));
        fits.push((w.iter().copied().collect(), my - mx.dot(&w)));
    }
    let correct = heldout
        .iter()
        .filter(|&&i| {
            let row = x.row_slice(i);
            let best = fits
                .iter()
                .map(|(w, b)| b + w.iter().zip(row).map(|(a, x)| a * x).sum::<f64>())
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, s)| if s > acc.1 { (c, s) } else { acc });
            best.0 == labels[i]
        })
        .count();
    Ok(correct as f64 / heldout.len().max(1) as f64)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson inputs", x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::ZeroVariance("degree"));
    }
    if !(syy > 0.0) {
        return Err(Error::ZeroVariance("error"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-node errors and degrees of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeErrors {
    pub case_id: String,
    pub errors: Vec<f64>,
    pub degrees: Vec<f64>,
}

/// Pearson r between degree (divided by the case's maximum degree) and
/// error, pooled across cases.
pub fn degree_error_correlation(cases: &[NodeErrors]) -> Result<f64> {
    let (mut d, mut e) = (Vec::new(), Vec::new());
    for c in cases {
        if c.errors.len() != c.degrees.len() {
            return Err(Error::dim("node errors", c.degrees.len(), c.errors.len()));
        }
        let max = c.degrees.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            return Err(Error::ZeroVariance("degree"));
        }
        d.extend(c.degrees.iter().map(|x| x / max));
        e.extend_from_slice(&c.errors);
    }
    if d.len() < 3 {
        return Err(Error::DegenerateData(format!("need at least 3 nodes, got {}", d.len())));
    }
    pearson(&d, &e)
}

/// Mean absolute error of each bus's own outputs (voltage and angle).
pub fn bus_errors(pred: &SystemState, label: &SolutionLabels) -> Result<Vec<f64>> {
    if pred.v.len() != label.v.len() || pred.theta.len() != label.theta.len() {
        return Err(Error::dim("bus predictions", label.v.len(), pred.v.len()));
    }
    Ok((0..label.v.len())
        .map(|i| 0.5 * ((pred.v[i] - label.v[i]).abs() + (pred.theta[i] - label.theta[i]).abs()))
        .collect())
}

/// Bus-to-bus degree over branches (parallel branches counted).
pub fn bus_degrees(case: &GridCase) -> Vec<usize> {
    let mut deg = vec![0; case.bus_count()];
    for b in &case.branches {
        deg[b.from_bus] += 1;
        deg[b.to_bus] += 1;
    }
    deg
}

/// Hop distance from `source` over branches; `None` when unreachable.
pub fn bfs_distance(case: &GridCase, source: usize) -> Vec<Option<usize>> {
    let n = case.bus_count();
    let mut adj = vec![Vec::new(); n];
    for b in &case.branches {
        adj[b.from_bus].push(b.to_bus);
        adj[b.to_bus].push(b.from_bus);
    }
    let mut dist = vec![None; n];
    if source >= n {
        return dist;
    }
    dist[source] = Some(0);
    let mut q = VecDeque::from([source]);
    while let Some(u) = q.pop_front() {
        let du = dist[u].expect("visited");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// Distance of every bus to the slack bus.
pub fn slack_distance(case: &GridCase) -> Vec<Option<usize>> {
    match case.buses.iter().position(|b| b.bus_type == BusType::Slack) {
        Some(s) => bfs_distance(case, s),
        None => vec![None; case.bus_count()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub prefactor: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Least squares on `(ln N, ln viol)`: `viol = prefactor * N^exponent`.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if let Some(&(n, v)) = points.iter().find(|(n, v)| !(*n > 0.0 && *v > 0.0)) {
        return Err(Error::NonPositiveInput(format!("point ({n}, {v})")));
    }
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} point(s)", points.len())));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateFit("all sizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    Ok(ScalingFit {
        exponent: slope,
        prefactor: icpt.exp(),
        residual: (rss / n).sqrt(),
    })
}

/// Node metadata of one activation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub case_id: String,
    pub sample: usize,
    pub node_type: String,
    pub index: usize,
    pub degree: usize,
}

/// Layer activations stacked over nodes and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub layers: Vec<Tensor>,
    pub nodes: Vec<NodeMeta>,
}

impl ActivationDump {
    /// Eval-mode activations of `model` on the given samples, rows ordered
    /// by sample then node type then node index.
    pub fn collect(model: &Model, case: &GridCase, samples: &[crate::grid::OperatingPoint], ids: &[usize]) -> Result<Self> {
        let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut nodes = Vec::new();
        for &s in ids {
            let op = samples.get(s).ok_or_else(|| Error::dim("sample index", samples.len(), s))?;
            let graph = crate::grid::build_hetero_graph(case, op)?;
            let (topo, inputs) = prepare(case, op)?;
            let acts = model.activations(&topo, &inputs)?;
            if rows.is_empty() {
                rows = vec![Vec::new(); acts.len()];
            }
            for t in NodeType::ALL {
                let deg = graph.degrees(t);
                for (i, d) in deg.iter().enumerate() {
                    nodes.push(NodeMeta {
                        case_id: case.case_id.clone(),
                        sample: s,
                        node_type: t.name().into(),
                        index: i,
                        degree: *d,
                    });
                }
                for (l, layer) in acts.iter().enumerate() {
                    let m = &layer[&t];
                    for r in 0..m.rows() {
                        rows[l].push(m.row_slice(r).to_vec());
                    }
                }
            }
        }
        let layers = rows
            .iter()
            .map(|r| {
                if r.is_empty() {
                    Ok(Tensor::zeros(0, model.config.hidden_dim))
                } else {
                    Ok(Tensor::from_rows(r)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, nodes })
    }

    /// Row indices of nodes of type `t`.
    pub fn rows_of(&self, t: NodeType) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.node_type == t.name())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors: BTreeMap<String, Tensor> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, t)| (format!("layer.{l}"), t.clone()))
            .collect();
        Ok(Checkpoint {
            header: serde_json::json!({ "kind": "activations", "nodes": self.nodes }),
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let nodes: Vec<NodeMeta> = serde_json::from_value(
            ck.header
                .get("nodes")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("not an activation dump".into()))?,
        )?;
        let mut layers = Vec::new();
        while let Some(t) = ck.tensors.get(&format!("layer.{}", layers.len())) {
            if t.rows() != nodes.len() {
                return Err(Error::dim("activation rows", nodes.len(), t.rows()));
            }
            layers.push(t.clone());
        }
        Ok(Self { layers, nodes })
    }
}

/// Comma-separated table with a header line.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}
