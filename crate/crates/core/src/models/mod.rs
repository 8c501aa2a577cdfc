//! Graph surrogate zoo and the bound-respecting prediction head.
//!
//! Homogeneous kinds (GCN, GAT, GIN, Transformer) run on a flattened graph
//! where every typed node is one row of a 20-wide feature matrix; the
//! heterogeneous kinds (HeteroGNN, HGT) keep per-type features and weights.
//! Every kind starts with a linear input projection to `hidden_dim`.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use gridbench_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NodeType, Relation};
use crate::physics::SystemState;
use crate::rng::{self, Rng};

pub mod checkpoint;
pub mod layers;
pub mod topology;

use layers::Act;
pub use topology::{prepare, sample_inputs, SampleInputs, Topology, FLAT_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gcn,
    Gat,
    Gin,
    Transformer,
    HeteroGnn,
    Hgt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Gcn,
        ModelKind::Gat,
        ModelKind::Gin,
        ModelKind::Transformer,
        ModelKind::HeteroGnn,
        ModelKind::Hgt,
    ];

    pub fn is_hetero(self) -> bool {
        matches!(self, ModelKind::HeteroGnn | ModelKind::Hgt)
    }

    pub fn uses_heads(self) -> bool {
        matches!(self, ModelKind::Gat | ModelKind::Transformer | ModelKind::Hgt)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
            ModelKind::Gin => "gin",
            ModelKind::Transformer => "transformer",
            ModelKind::HeteroGnn => "hetero_gnn",
            ModelKind::Hgt => "hgt",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_slope")]
    pub leaky_relu_slope: f64,
    /// Transformer only: attend over all nodes instead of graph neighbors.
    #[serde(default)]
    pub unmasked_attention: bool,
}

fn default_heads() -> usize {
    1
}

fn default_slope() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(kind: ModelKind, layers: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            layers,
            hidden_dim,
            heads: if kind.uses_heads() { 2 } else { 1 },
            dropout: 0.0,
            leaky_relu_slope: default_slope(),
            unmasked_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.heads == 0 {
            return Err(Error::Config("layers, hidden_dim and heads must be positive".into()));
        }
        if self.kind.uses_heads() && self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..=0.3).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 0.3]", self.dropout)));
        }
        if !(self.leaky_relu_slope.is_finite() && self.leaky_relu_slope >= 0.0) {
            return Err(Error::Config("leaky_relu_slope must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    fn act(&self) -> Act {
        Act::Leaky(self.leaky_relu_slope)
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        )
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> ModelParams {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), f(t))).collect(),
        }
    }
}

/// Parameter name -> tape variable for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars(pub BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Builds from the leaves passed to a finite-difference closure, in the
    /// name order of `params`.
    pub fn from_slice(params: &ModelParams, vars: &[Var]) -> Self {
        ParamVars(params.tensors.keys().cloned().zip(vars.iter().copied()).collect())
    }
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.range(-a, a)).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("shape")
}

fn layer_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize, bool)> {
    // (name, rows, cols, xavier?) - biases and GIN eps start at zero
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let mut v: Vec<(String, usize, usize, bool)> = Vec::new();
    let mut w = |name: String, r: usize, c: usize| v.push((name, r, c, true));
    if cfg.kind.is_hetero() {
        for t in NodeType::ALL {
            w(format!("in.{}.w", t.name()), t.feature_dim(), d);
        }
    } else {
        w("in.w".into(), FLAT_FEATURES, d);
    }
    for l in 0..cfg.layers {
        match cfg.kind {
            ModelKind::Gcn => w(format!("l{l}.w"), d, d),
            ModelKind::Gat => {
                for k in 0..cfg.heads {
                    w(format!("l{l}.h{k}.w"), d, dh);
                    w(format!("l{l}.h{k}.a_src"), dh, 1);
                    w(format!("l{l}.h{k}.a_dst"), dh, 1);
                }
            }
            ModelKind::Gin => {
                w(format!("l{l}.w1"), d, d);
                w(format!("l{l}.w2"), d, d);
            }
            ModelKind::Transformer => {
                for k in 0..cfg.heads {
                    for m in ["wq", "wk", "wv"] {
                        w(format!("l{l}.h{k}.{m}"), d, dh);
                    }
                }
                w(format!("l{l}.wo"), d, d);
            }
            ModelKind::HeteroGnn => {
                for t in NodeType::ALL {
                    w(format!("l{l}.self.{}.w", t.name()), d, d);
                }
                for r in Relation::ALL {
                    w(format!("l{l}.rel.{}.w", r.name()), d, d);
                }
            }
            ModelKind::Hgt => {
                for k in 0..cfg.heads {
                    for t in NodeType::ALL {
                        for m in ["q", "k", "v"] {
                            w(format!("l{l}.h{k}.{m}.{}", t.name()), d, dh);
                        }
                    }
                    for r in Relation::ALL {
                        w(format!("l{l}.h{k}.att.{}", r.name()), dh, dh);
                    }
                }
                for t in NodeType::ALL {
                    w(format!("l{l}.out.{}.w", t.name()), d, d);
                }
            }
        }
    }
    w("head.bus.w".into(), d, 2);
    w("head.gen.w".into(), d, 2);

    let mut z = |name: String, r: usize, c: usize| v.push((name, r, c, false));
    if cfg.kind.is_hetero() {
        for t in NodeType::ALL {
            z(format!("in.{}.b", t.name()), 1, d);
        }
    } else {
        z("in.b".into(), 1, d);
    }
    for l in 0..cfg.layers {
        match cfg.kind {
            ModelKind::Gcn | ModelKind::Gat | ModelKind::Transformer => z(format!("l{l}.b"), 1, d),
            ModelKind::Gin => {
                z(format!("l{l}.eps"), 1, 1);
                z(format!("l{l}.b1"), 1, d);
                z(format!("l{l}.b2"), 1, d);
            }
            ModelKind::HeteroGnn => {
                for t in NodeType::ALL {
                    z(format!("l{l}.self.{}.b", t.name()), 1, d);
                }
            }
            ModelKind::Hgt => {
                for t in NodeType::ALL {
                    z(format!("l{l}.out.{}.b", t.name()), 1, d);
                }
            }
        }
    }
    z("head.bus.b".into(), 1, 2);
    z("head.gen.b".into(), 1, 2);
    v
}

/// Xavier-uniform weights, zero biases, drawn in a fixed name order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = Rng::new(seed, rng::stream::INIT);
    let mut shapes = layer_shapes(cfg);
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    let tensors = shapes
        .into_iter()
        .map(|(name, r, c, x)| {
            let t = if x { xavier(&mut rng, r, c) } else { Tensor::zeros(r, c) };
            (name, t)
        })
        .collect();
    Ok(ModelParams { tensors })
}

/// Training-mode behavior for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Constants of a topology registered on one tape, shared by every sample
/// of a batch.
pub struct TopoVars {
    pub gcn_norm: Var,
    pub adjacency: Var,
    pub relation_mean: BTreeMap<Relation, Var>,
    pub theta_mask: Var,
    pub v_span: Var,
    pub theta_span: Var,
    pub pg_span: Var,
    pub qg_span: Var,
    pub v_lo: Var,
    pub theta_lo: Var,
    pub pg_lo: Var,
    pub qg_lo: Var,
}

impl TopoVars {
    pub fn new(tape: &mut Tape, topo: &Topology) -> Self {
        let h = &topo.head;
        let span = |hi: &Tensor, lo: &Tensor| hi.zip_map(lo, |a, b| a - b);
        Self {
            gcn_norm: tape.constant(topo.gcn_norm.clone()),
            adjacency: tape.constant(topo.adjacency.clone()),
            relation_mean: topo
                .relations
                .iter()
                .map(|(r, m)| (*r, tape.constant(m.mean.clone())))
                .collect(),
            theta_mask: tape.constant(h.theta_mask.clone()),
            v_span: tape.constant(span(&h.v_hi, &h.v_lo)),
            theta_span: tape.constant(span(&h.theta_hi, &h.theta_lo)),
            pg_span: tape.constant(span(&h.pg_hi, &h.pg_lo)),
            qg_span: tape.constant(span(&h.qg_hi, &h.qg_lo)),
            v_lo: tape.constant((*h.v_lo).clone()),
            theta_lo: tape.constant((*h.theta_lo).clone()),
            pg_lo: tape.constant((*h.pg_lo).clone()),
            qg_lo: tape.constant((*h.qg_lo).clone()),
        }
    }
}

/// Final node embeddings for the node types the head reads.
pub struct Embeddings {
    pub bus: Var,
    pub gen: Var,
    /// Per-layer activations by node type (input projection first).
    pub layers: Vec<BTreeMap<NodeType, Var>>,
}

fn split_flat(tape: &mut Tape, topo: &Topology, h: Var) -> Result<BTreeMap<NodeType, Var>> {
    NodeType::ALL
        .iter()
        .map(|&t| Ok((t, tape.gather_rows(h, topo.flat_rows(t))?)))
        .collect()
}

fn maybe_dropout(tape: &mut Tape, h: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => Ok(layers::dropout(tape, h, p, &mut || rng.uniform())?),
        _ => Ok(h),
    }
}

/// Runs the encoder for one sample.
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    topo: &Topology,
    tv: &TopoVars,
    inputs: &SampleInputs,
    mut mode: Mode<'_>,
    keep_layers: bool,
) -> Result<Embeddings> {
    let act = cfg.act();
    let mut per_layer = Vec::new();
    if !cfg.kind.is_hetero() {
        let x = tape.constant(inputs.flat.clone());
        let mut h = layers::linear(tape, x, p.get("in.w")?, Some(p.get("in.b")?))?;
        h = act.apply(tape, h);
        if keep_layers {
            per_layer.push(split_flat(tape, topo, h)?);
        }
        for l in 0..cfg.layers {
            let name = |s: &str| format!("l{l}.{s}");
            h = match cfg.kind {
                ModelKind::Gcn => layers::gcn(tape, h, tv.gcn_norm, p.get(&name("w"))?, p.get(&name("b"))?, act)?,
                ModelKind::Gat => {
                    let heads = (0..cfg.heads)
                        .map(|k| {
                            Ok(layers::GatHead {
                                w: p.get(&name(&format!("h{k}.w")))?,
                                a_src: p.get(&name(&format!("h{k}.a_src")))?,
                                a_dst: p.get(&name(&format!("h{k}.a_dst")))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layers::gat(tape, h, &heads, p.get(&name("b"))?, &topo.attn_blocked, cfg.leaky_relu_slope, act)?
                }
                ModelKind::Gin => {
                    let mlp = layers::Mlp {
                        w1: p.get(&name("w1"))?,
                        b1: p.get(&name("b1"))?,
                        w2: p.get(&name("w2"))?,
                        b2: p.get(&name("b2"))?,
                    };
                    layers::gin(tape, h, tv.adjacency, p.get(&name("eps"))?, Some(&mlp), act, act)?
                }
                ModelKind::Transformer => {
                    let heads = (0..cfg.heads)
                        .map(|k| {
                            Ok(layers::AttnHead {
                                wq: p.get(&name(&format!("h{k}.wq")))?,
                                wk: p.get(&name(&format!("h{k}.wk")))?,
                                wv: p.get(&name(&format!("h{k}.wv")))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mask = (!cfg.unmasked_attention).then_some(&topo.attn_blocked);
                    layers::transformer(tape, h, &heads, p.get(&name("wo"))?, p.get(&name("b"))?, mask, act)?
                }
                ModelKind::HeteroGnn | ModelKind::Hgt => unreachable!(),
            };
            h = maybe_dropout(tape, h, cfg.dropout, &mut mode)?;
            if keep_layers {
                per_layer.push(split_flat(tape, topo, h)?);
            }
        }
        let bus = tape.gather_rows(h, topo.flat_rows(NodeType::Bus))?;
        let gen = tape.gather_rows(h, topo.flat_rows(NodeType::Generator))?;
        return Ok(Embeddings {
            bus,
            gen,
            layers: per_layer,
        });
    }

    let mut h: BTreeMap<NodeType, Var> = BTreeMap::new();
    for t in NodeType::ALL {
        let x = tape.constant(inputs.typed[&t].clone());
        let y = layers::linear(
            tape,
            x,
            p.get(&format!("in.{}.w", t.name()))?,
            Some(p.get(&format!("in.{}.b", t.name()))?),
        )?;
        h.insert(t, act.apply(tape, y));
    }
    if keep_layers {
        per_layer.push(h.clone());
    }
    for l in 0..cfg.layers {
        let mut next = BTreeMap::new();
        for t in NodeType::ALL {
            let incoming: Vec<Relation> = Relation::ALL.into_iter().filter(|r| r.dst() == t).collect();
            let out = match cfg.kind {
                ModelKind::HeteroGnn => {
                    let inputs = incoming
                        .iter()
                        .map(|r| {
                            Ok(layers::HeteroInput {
                                h_src: h[&r.src()],
                                mean: tv.relation_mean[r],
                                w: p.get(&format!("l{l}.rel.{}.w", r.name()))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layers::hetero_gnn(
                        tape,
                        h[&t],
                        p.get(&format!("l{l}.self.{}.w", t.name()))?,
                        p.get(&format!("l{l}.self.{}.b", t.name()))?,
                        &inputs,
                        act,
                    )?
                }
                ModelKind::Hgt => {
                    let heads = (0..cfg.heads)
                        .map(|k| {
                            let inputs = incoming
                                .iter()
                                .map(|r| {
                                    let s = r.src().name();
                                    Ok(layers::HgtInput {
                                        h_src: h[&r.src()],
                                        wk: p.get(&format!("l{l}.h{k}.k.{s}"))?,
                                        wv: p.get(&format!("l{l}.h{k}.v.{s}"))?,
                                        w_att: p.get(&format!("l{l}.h{k}.att.{}", r.name()))?,
                                        blocked: topo.relations[r].blocked.clone(),
                                    })
                                })
                                .collect::<Result<Vec<_>>>()?;
                            Ok((p.get(&format!("l{l}.h{k}.q.{}", t.name()))?, inputs))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layers::hgt(
                        tape,
                        h[&t],
                        &heads,
                        p.get(&format!("l{l}.out.{}.w", t.name()))?,
                        p.get(&format!("l{l}.out.{}.b", t.name()))?,
                        act,
                    )?
                }
                _ => unreachable!(),
            };
            let out = maybe_dropout(tape, out, cfg.dropout, &mut mode)?;
            next.insert(t, out);
        }
        h = next;
        if keep_layers {
            per_layer.push(h.clone());
        }
    }
    Ok(Embeddings {
        bus: h[&NodeType::Bus],
        gen: h[&NodeType::Generator],
        layers: per_layer,
    })
}

/// Tape outputs of the head, all column vectors.
#[derive(Debug, Clone, Copy)]
pub struct PredVars {
    pub v: Var,
    pub theta: Var,
    pub p_g: Var,
    pub q_g: Var,
}

impl PredVars {
    pub fn state(&self, tape: &Tape) -> SystemState {
        let col = |v: Var| tape.value(v).data().to_vec();
        SystemState {
            v: col(self.v),
            theta: col(self.theta),
            p_g: col(self.p_g),
            q_g: col(self.q_g),
        }
    }
}

fn bounded(tape: &mut Tape, z: Var, lo: Var, span: Var, lo_t: &Rc<Tensor>, hi_t: &Rc<Tensor>) -> Result<Var> {
    let s = tape.sigmoid(z);
    let y = tape.mul(s, span)?;
    let y = tape.add(y, lo)?;
    Ok(tape.clamp(y, lo_t.clone(), hi_t.clone())?)
}

/// `y = lo + sigmoid(z) (hi - lo)`, clamped so rounding never leaves the
/// box; the slack angle is multiplied by zero.
pub fn predict(tape: &mut Tape, p: &ParamVars, topo: &Topology, tv: &TopoVars, emb: &Embeddings) -> Result<PredVars> {
    let hb = &topo.head;
    let zb = layers::linear(tape, emb.bus, p.get("head.bus.w")?, Some(p.get("head.bus.b")?))?;
    let zg = layers::linear(tape, emb.gen, p.get("head.gen.w")?, Some(p.get("head.gen.b")?))?;
    let zv = tape.select_cols(zb, [0usize])?;
    let zt = tape.select_cols(zb, [1usize])?;
    let zp = tape.select_cols(zg, [0usize])?;
    let zq = tape.select_cols(zg, [1usize])?;
    let v = bounded(tape, zv, tv.v_lo, tv.v_span, &hb.v_lo, &hb.v_hi)?;
    let theta = bounded(tape, zt, tv.theta_lo, tv.theta_span, &hb.theta_lo, &hb.theta_hi)?;
    let theta = tape.mul(theta, tv.theta_mask)?;
    let p_g = bounded(tape, zp, tv.pg_lo, tv.pg_span, &hb.pg_lo, &hb.pg_hi)?;
    let q_g = bounded(tape, zq, tv.qg_lo, tv.qg_span, &hb.qg_lo, &hb.qg_hi)?;
    Ok(PredVars { v, theta, p_g, q_g })
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Eval-mode prediction on a throwaway tape.
    pub fn predict_state(&self, topo: &Topology, inputs: &SampleInputs) -> Result<SystemState> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let tv = TopoVars::new(&mut tape, topo);
        let emb = encode(&mut tape, &self.config, &p, topo, &tv, inputs, Mode::Eval, false)?;
        Ok(predict(&mut tape, &p, topo, &tv, &emb)?.state(&tape))
    }

    /// Eval-mode per-layer activations keyed by node type.
    pub fn activations(&self, topo: &Topology, inputs: &SampleInputs) -> Result<Vec<BTreeMap<NodeType, Tensor>>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let tv = TopoVars::new(&mut tape, topo);
        let emb = encode(&mut tape, &self.config, &p, topo, &tv, inputs, Mode::Eval, true)?;
        Ok(emb
            .layers
            .iter()
            .map(|m| m.iter().map(|(t, v)| (*t, tape.value(*v).clone())).collect())
            .collect())
    }
}
