//! Budgeted training, model selection and the four task runners.
//!
//! Everything here is single-threaded and deterministic: the same config,
//! seed and data give a byte-identical report and checkpoint.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gridbench_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_hetero_graph, FEATURE_SCHEMA_VERSION};
use crate::ingest::{Dataset, EpochCursor, Split, SplitSpec};
use crate::metrics::{evaluate, MetricBundle};
use crate::models::checkpoint::Checkpoint;
use crate::models::{
    encode, init_params, predict, sample_inputs, Mode, Model, ModelConfig, ModelParams, SampleInputs,
    Topology, TopoVars,
};
use crate::objectives::{
    compose_with_cost, loss_al, loss_mse, loss_vbl, tape_residuals, update_duals, DualSchedule, DualState,
    LossValues, ObjectiveKind, ResidualPlan, ResidualSample,
};
use crate::physics::{generation_cost, Demand, PhysicsOptions, SystemState};
use crate::rng::{self, Rng, RNG_ALGORITHM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    T1,
    T2,
    T3,
    T4,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Task::T1),
            "T2" => Ok(Task::T2),
            "T3" => Ok(Task::T3),
            "T4" => Ok(Task::T4),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default)]
    pub ema: f64,
    #[serde(default)]
    pub schedule: DualSchedule,
    #[serde(default = "one")]
    pub rho_growth: f64,
    /// Penalize `|h|^2` instead of `|max(h, 0)|^2` in the AL quadratic.
    #[serde(default)]
    pub al_literal_quadratic: bool,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            rho: 1.0,
            ema: 0.0,
            schedule: DualSchedule::default(),
            rho_growth: 1.0,
            al_literal_quadratic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub cost_weight: f64,
    pub train_cases: Vec<String>,
    /// Defaults to `train_cases`.
    #[serde(default)]
    pub eval_cases: Vec<String>,
    pub budget_samples: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: f64,
    pub seed: u64,
    /// Defaults to `budget_samples / 20`.
    #[serde(default)]
    pub val_every_samples: Option<u64>,
    /// T4: fraction of the target's train split used for fine-tuning.
    #[serde(default)]
    pub finetune_fraction: Option<f64>,
    /// T4: checkpoint to fine-tune from.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    /// T4: restore optimizer moments from the checkpoint instead of resetting.
    #[serde(default)]
    pub restore_optimizer: bool,
    #[serde(default = "yes")]
    pub include_shunts: bool,
}

pub const DEFAULT_FINETUNE_FRACTION: f64 = 0.25;

impl RunConfig {
    pub fn new(task: Task, model: ModelConfig, objective: ObjectiveKind, train_cases: Vec<String>) -> Self {
        Self {
            task,
            model,
            objective: ObjectiveConfig::new(objective),
            cost_weight: 0.0,
            train_cases,
            eval_cases: Vec::new(),
            budget_samples: 1000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            val_every_samples: None,
            finetune_fraction: None,
            pretrained: None,
            restore_optimizer: false,
            include_shunts: true,
        }
    }

    pub fn eval_cases(&self) -> &[String] {
        if self.eval_cases.is_empty() {
            &self.train_cases
        } else {
            &self.eval_cases
        }
    }

    pub fn val_every(&self) -> u64 {
        self.val_every_samples.unwrap_or(self.budget_samples / 20).max(1)
    }

    pub fn finetune_fraction(&self) -> f64 {
        self.finetune_fraction.unwrap_or(DEFAULT_FINETUNE_FRACTION)
    }

    fn physics(&self) -> PhysicsOptions {
        PhysicsOptions {
            include_shunts: self.include_shunts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.budget_samples == 0 {
            return bad("budget_samples must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.cost_weight >= 0.0) {
            return bad("weight_decay, grad_clip and cost_weight must be >= 0".into());
        }
        if self.train_cases.is_empty() {
            return bad("train_cases is empty".into());
        }
        let o = &self.objective;
        if !(o.rho > 0.0 && o.rho.is_finite()) || !(0.0..=1.0).contains(&o.ema) || !(o.rho_growth > 0.0) {
            return bad("objective needs rho > 0, ema in [0, 1], rho_growth > 0".into());
        }
        match self.task {
            Task::T1 if self.train_cases.len() != 1 => bad("T1 trains on exactly one case".into()),
            Task::T3 => {
                if let Some(c) = self.eval_cases.iter().find(|c| self.train_cases.contains(c)) {
                    return Err(Error::Leakage(c.clone()));
                }
                if self.eval_cases.is_empty() {
                    return bad("T3 needs at least one held-out eval case".into());
                }
                Ok(())
            }
            Task::T4 => {
                let f = self.finetune_fraction();
                if !(f > 0.0 && f <= 1.0) {
                    return bad(format!("finetune_fraction {f} outside (0, 1]"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Loaded datasets by case id.
pub type DataPool = BTreeMap<String, Dataset>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples_seen: u64,
    pub val_score: f64,
    pub val_viol: f64,
    /// Mean batch loss since the previous point.
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    /// Final validation violation of the from-scratch run.
    pub threshold: f64,
    pub finetune_samples: Option<u64>,
    pub scratch_samples: Option<u64>,
    /// `scratch_samples / finetune_samples` when both exist and the latter is
    /// positive.
    pub speedup: Option<f64>,
    pub scratch_metrics: Vec<MetricBundle>,
    pub scratch_curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub config: RunConfig,
    pub rng_algorithm: String,
    pub feature_schema_version: u32,
    pub metrics: Vec<MetricBundle>,
    pub curve: Vec<CurvePoint>,
    pub selected_checkpoint: String,
    pub selected_samples_seen: u64,
    pub best_val_score: f64,
    pub steps: u64,
    pub samples_seen: u64,
    pub final_train_loss: LossValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSummary>,
}

impl RunReport {
    pub fn curve_csv(&self) -> String {
        curve_csv(&self.curve)
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("samples_seen,val_score,val_viol,train_loss\n");
    for p in curve {
        let tl = p.train_loss.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", p.samples_seen, p.val_score, p.val_viol, tl));
    }
    s
}

/// Result of a task run: the report, the selected checkpoint, and wall time
/// (kept out of the report so reports stay reproducible).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
    pub wall_seconds: f64,
}

/// A dataset with graph inputs and demands precomputed for every sample.
struct Prepared<'a> {
    ds: &'a Dataset,
    topo: Topology,
    plan: ResidualPlan,
    inputs: Vec<SampleInputs>,
    demand: Vec<Demand>,
    c_ref: f64,
}

impl<'a> Prepared<'a> {
    fn new(ds: &'a Dataset, opts: PhysicsOptions) -> Result<Self> {
        let case = &ds.case;
        let first = ds.samples.first().ok_or(Error::EmptySampleSet)?;
        let topo = Topology::new(case, &build_hetero_graph(case, first)?)?;
        let mut inputs = Vec::with_capacity(ds.samples.len());
        for (k, op) in ds.samples.iter().enumerate() {
            let g = build_hetero_graph(case, op)?;
            if !topo.matches(&g) {
                return Err(Error::InvalidCase(format!("sample {k} changes the topology")));
            }
            inputs.push(sample_inputs(&g));
        }
        let demand = ds.samples.iter().map(|op| Demand::for_point(case, op)).collect();
        let train = &ds.split.train_idx;
        let c_ref = if train.is_empty() {
            0.0
        } else {
            let mut s = 0.0;
            for &i in train {
                s += generation_cost(case, &ds.samples[i].labels.p_g)?;
            }
            s / train.len() as f64
        };
        Ok(Self {
            ds,
            topo,
            plan: ResidualPlan::new(case, opts),
            inputs,
            demand,
            c_ref,
        })
    }

    fn evaluate(&self, model: &Model, idx: &[usize], opts: PhysicsOptions) -> Result<MetricBundle> {
        let mut preds = Vec::with_capacity(idx.len());
        for &i in idx {
            preds.push(model.predict_state(&self.topo, &self.inputs[i])?);
        }
        let ops: Vec<_> = idx.iter().map(|&i| self.ds.samples[i].clone()).collect();
        evaluate(&self.ds.case, &ops, &preds, opts)
    }

    fn evaluate_split(&self, model: &Model, split: Split, opts: PhysicsOptions) -> Result<MetricBundle> {
        let idx = self.ds.split.indices(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(format!("{} of `{}`", split.name(), self.ds.case_id())));
        }
        self.evaluate(model, idx, opts)
    }
}

fn lookup<'a>(pool: &'a DataPool, id: &str) -> Result<&'a Dataset> {
    pool.get(id)
        .ok_or_else(|| Error::DataMissing(format!("no dataset for case `{id}`")))
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.tensors.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for k in 0..pd.len() {
                let gk = g.data()[k];
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let mh = md[k] / c1;
                let vh = vd[k] / c2;
                pd[k] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * pd[k]);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

struct TrainOutcome {
    best: ModelParams,
    best_adam: AdamW,
    best_samples: u64,
    best_score: f64,
    curve: Vec<CurvePoint>,
    steps: u64,
    samples_seen: u64,
    dual: DualState,
    last_loss: LossValues,
}

fn validate_all(preps: &[Prepared<'_>], model: &Model, opts: PhysicsOptions) -> Result<(f64, f64)> {
    let (mut score, mut viol) = (0.0, 0.0);
    for p in preps {
        let m = p.evaluate_split(model, Split::Val, opts)?;
        score += m.validation_score;
        viol += m.viol.viol_total_normalized;
    }
    let n = preps.len() as f64;
    Ok((score / n, viol / n))
}

fn train_loop(
    cfg: &RunConfig,
    preps: &[Prepared<'_>],
    train_splits: &[SplitSpec],
    init: ModelParams,
    adam: Option<AdamW>,
) -> Result<TrainOutcome> {
    let opts = cfg.physics();
    let obj = &cfg.objective;
    let mut model = Model {
        config: cfg.model.clone(),
        params: init,
    };
    let mut adam = adam.unwrap_or_else(|| AdamW::new(cfg.lr, cfg.weight_decay, &model.params));
    adam.lr = cfg.lr;
    adam.weight_decay = cfg.weight_decay;
    let mut dual = DualState::new(obj.rho, obj.ema, obj.schedule)?;
    dual.rho_growth = obj.rho_growth;
    for p in preps {
        dual.register(p.ds.case_id(), &p.plan);
    }
    let mut cursors = train_splits
        .iter()
        .map(|s| EpochCursor::new(s, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut drop_rng = Rng::new(cfg.seed, rng::stream::DROPOUT);

    let val_every = cfg.val_every();
    let (s0, v0) = validate_all(preps, &model, opts)?;
    let mut curve = vec![CurvePoint {
        samples_seen: 0,
        val_score: s0,
        val_viol: v0,
        train_loss: None,
    }];
    let mut best = (s0, 0u64, model.params.clone(), adam.clone());
    let (mut samples_seen, mut steps) = (0u64, 0u64);
    let (mut loss_acc, mut loss_n) = (0.0, 0u64);
    let mut last_loss = LossValues::default();

    while samples_seen < cfg.budget_samples {
        // the stream furthest behind its share goes next
        let k = (0..cursors.len())
            .min_by(|&a, &b| {
                let la = train_splits[a].train_idx.len() as u128;
                let lb = train_splits[b].train_idx.len() as u128;
                (cursors[a].samples_seen as u128 * lb).cmp(&(cursors[b].samples_seen as u128 * la))
            })
            .expect("at least one stream");
        let idx = cursors[k].next_batch(cfg.batch_size);
        let prep = &preps[k];
        let case_id = prep.ds.case_id();
        let cdual = dual.case(case_id)?.clone();

        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape);
        let tv = TopoVars::new(&mut tape, &prep.topo);
        let mut totals = Vec::with_capacity(idx.len());
        let mut residuals = Vec::new();
        let mut batch_vals = LossValues::default();
        let inv = 1.0 / idx.len() as f64;
        for &i in &idx {
            let emb = encode(
                &mut tape,
                &model.config,
                &pv,
                &prep.topo,
                &tv,
                &prep.inputs[i],
                Mode::Train(&mut drop_rng),
                false,
            )?;
            let y = predict(&mut tape, &pv, &prep.topo, &tv, &emb)?;
            let label = &prep.ds.samples[i].labels;
            let l = match obj.kind {
                ObjectiveKind::Mse => loss_mse(&mut tape, &y, label)?,
                kind => {
                    let res = tape_residuals(&mut tape, &prep.plan, &prep.demand[i], &y)?;
                    residuals.push(ResidualSample::read(&tape, &res));
                    if kind == ObjectiveKind::Al {
                        loss_al(&mut tape, &y, label, &res, &cdual, dual.rho, obj.al_literal_quadratic)?
                    } else {
                        loss_vbl(&mut tape, &y, label, &res, &cdual)?
                    }
                }
            };
            let l = compose_with_cost(&mut tape, l, &prep.ds.case, y.p_g, cfg.cost_weight, prep.c_ref)?;
            l.check_finite(&tape, samples_seen)?;
            batch_vals.add_scaled(&l.values(&tape), inv);
            totals.push(l.total);
        }
        let mut loss = totals[0];
        for &t in &totals[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss = tape.scale(loss, inv);
        let g = tape.backward(loss)?;
        let mut grads: BTreeMap<String, Tensor> =
            pv.0.iter().map(|(k, &v)| (k.clone(), g.wrt(&tape, v))).collect();
        if !grads.values().all(Tensor::is_finite) {
            return Err(Error::NonFiniteLoss {
                term: "gradient".into(),
                samples_seen,
            });
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.update(&mut model.params, &grads);

        let before = samples_seen;
        samples_seen += idx.len() as u64;
        steps += 1;
        loss_acc += batch_vals.total;
        loss_n += 1;
        last_loss = batch_vals;
        update_duals(obj.kind, &mut dual, case_id, &residuals, samples_seen)?;

        let done = samples_seen >= cfg.budget_samples;
        if samples_seen / val_every > before / val_every || done {
            let (s, v) = validate_all(preps, &model, opts)?;
            curve.push(CurvePoint {
                samples_seen,
                val_score: s,
                val_viol: v,
                train_loss: Some(loss_acc / loss_n as f64),
            });
            loss_acc = 0.0;
            loss_n = 0;
            if s < best.0 {
                best = (s, samples_seen, model.params.clone(), adam.clone());
            }
        }
    }
    Ok(TrainOutcome {
        best: best.2,
        best_adam: best.3,
        best_samples: best.1,
        best_score: best.0,
        curve,
        steps,
        samples_seen,
        dual,
        last_loss,
    })
}

fn build_checkpoint(cfg: &RunConfig, out: &TrainOutcome) -> Result<Checkpoint> {
    let header = serde_json::json!({
        "model": cfg.model,
        "run_config": cfg,
        "seed": cfg.seed,
        "samples_seen": out.best_samples,
        "dual": out.dual,
        "feature_schema_version": FEATURE_SCHEMA_VERSION,
        "rng_algorithm": RNG_ALGORITHM,
        "adam_step": out.best_adam.step,
    });
    let mut tensors = out.best.tensors.clone();
    for (k, t) in &out.best_adam.m {
        tensors.insert(format!("adam.m.{k}"), t.clone());
    }
    for (k, t) in &out.best_adam.v {
        tensors.insert(format!("adam.v.{k}"), t.clone());
    }
    Ok(Checkpoint { header, tensors })
}

/// Model stored in `ck`, after checking the feature layout and parameter
/// shapes.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let version = ck.header.get("feature_schema_version").and_then(|v| v.as_u64());
    if version != Some(FEATURE_SCHEMA_VERSION as u64) {
        return Err(Error::IncompatibleSchema(format!(
            "checkpoint feature schema {version:?}, expected {FEATURE_SCHEMA_VERSION}"
        )));
    }
    let config: ModelConfig = serde_json::from_value(
        ck.header
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("header has no model".into()))?,
    )?;
    let template = init_params(&config, 0)?;
    let mut params = ModelParams::default();
    for (name, t) in &template.tensors {
        let got = ck
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
        params.tensors.insert(name.clone(), got.clone());
    }
    Ok(Model { config, params })
}

fn optimizer_from_checkpoint(ck: &Checkpoint, cfg: &RunConfig, params: &ModelParams) -> Result<AdamW> {
    let mut a = AdamW::new(cfg.lr, cfg.weight_decay, params);
    for name in params.tensors.keys() {
        for (prefix, dst) in [("adam.m.", &mut a.m), ("adam.v.", &mut a.v)] {
            let t = ck
                .tensors
                .get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for `{name}`")))?;
            dst.insert(name.clone(), t.clone());
        }
    }
    a.step = ck.header.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(0);
    Ok(a)
}

struct Trained {
    outcome: TrainOutcome,
    metrics: Vec<MetricBundle>,
    checkpoint: Checkpoint,
}

fn train_and_eval(
    cfg: &RunConfig,
    pool: &DataPool,
    init: ModelParams,
    adam: Option<AdamW>,
    cap: Option<f64>,
) -> Result<Trained> {
    let opts = cfg.physics();
    let held_out: &[String] = if cfg.task == Task::T3 { &cfg.eval_cases } else { &[] };
    let mut preps = Vec::new();
    let mut splits = Vec::new();
    for id in &cfg.train_cases {
        let ds = lookup(pool, id)?;
        // structural check on the stream itself, not just the config lists
        if held_out.iter().any(|h| h == ds.case_id()) || ds.samples.iter().any(|o| held_out.contains(&o.case_id)) {
            return Err(Error::Leakage(ds.case_id().to_string()));
        }
        splits.push(match cap {
            Some(f) => ds.split.cap_train(f),
            None => ds.split.clone(),
        });
        preps.push(Prepared::new(ds, opts)?);
    }
    let outcome = train_loop(cfg, &preps, &splits, init, adam)?;
    let best = Model {
        config: cfg.model.clone(),
        params: outcome.best.clone(),
    };
    let mut metrics = Vec::new();
    for id in cfg.eval_cases() {
        let ds = lookup(pool, id)?;
        metrics.push(Prepared::new(ds, opts)?.evaluate_split(&best, Split::Test, opts)?);
    }
    let checkpoint = build_checkpoint(cfg, &outcome)?;
    Ok(Trained {
        outcome,
        metrics,
        checkpoint,
    })
}

fn report(cfg: &RunConfig, t: &Trained, transfer: Option<TransferSummary>) -> RunReport {
    let o = &t.outcome;
    RunReport {
        task: cfg.task,
        config: cfg.clone(),
        rng_algorithm: RNG_ALGORITHM.into(),
        feature_schema_version: FEATURE_SCHEMA_VERSION,
        metrics: t.metrics.clone(),
        curve: o.curve.clone(),
        selected_checkpoint: format!("samples-{}", o.best_samples),
        selected_samples_seen: o.best_samples,
        best_val_score: o.best_score,
        steps: o.steps,
        samples_seen: o.samples_seen,
        final_train_loss: o.last_loss,
        transfer,
    }
}

/// First validation point whose violation is at most `threshold`.
pub fn samples_to_threshold(curve: &[CurvePoint], threshold: f64) -> Option<u64> {
    curve.iter().find(|p| p.val_viol <= threshold).map(|p| p.samples_seen)
}

/// Trains from a fresh initialization (T1-T3) and returns the report and
/// the selected checkpoint.
pub fn train(cfg: &RunConfig, pool: &DataPool) -> Result<RunOutput> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let init = init_params(&cfg.model, cfg.seed)?;
    let t = train_and_eval(cfg, pool, init, None, None)?;
    Ok(RunOutput {
        report: report(cfg, &t, None),
        checkpoint: t.checkpoint,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fine-tunes `pretrained` on a capped fraction of the target train split
/// and compares against a from-scratch run on the same data and budget.
pub fn finetune(cfg: &RunConfig, pool: &DataPool, pretrained: &Checkpoint) -> Result<RunOutput> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let base = model_from_checkpoint(pretrained)?;
    if base.config != cfg.model {
        return Err(Error::Config("model config differs from the pretrained checkpoint".into()));
    }
    let adam = if cfg.restore_optimizer {
        Some(optimizer_from_checkpoint(pretrained, cfg, &base.params)?)
    } else {
        None
    };
    let cap = Some(cfg.finetune_fraction());
    let ft = train_and_eval(cfg, pool, base.params, adam, cap)?;
    let scratch = train_and_eval(cfg, pool, init_params(&cfg.model, cfg.seed)?, None, cap)?;
    let threshold = scratch.outcome.curve.last().map(|p| p.val_viol).unwrap_or(f64::INFINITY);
    let f = samples_to_threshold(&ft.outcome.curve, threshold);
    let s = samples_to_threshold(&scratch.outcome.curve, threshold);
    let speedup = match (f, s) {
        (Some(f), Some(s)) if f > 0 => Some(s as f64 / f as f64),
        _ => None,
    };
    let transfer = TransferSummary {
        threshold,
        finetune_samples: f,
        scratch_samples: s,
        speedup,
        scratch_metrics: scratch.metrics.clone(),
        scratch_curve: scratch.outcome.curve.clone(),
    };
    Ok(RunOutput {
        report: report(cfg, &ft, Some(transfer)),
        checkpoint: ft.checkpoint,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Dispatches on `cfg.task`. T4 loads `cfg.pretrained`.
pub fn run_task(cfg: &RunConfig, pool: &DataPool) -> Result<RunOutput> {
    match cfg.task {
        Task::T1 | Task::T2 | Task::T3 => train(cfg, pool),
        Task::T4 => {
            let path = cfg
                .pretrained
                .as_ref()
                .ok_or_else(|| Error::Config("T4 requires a pretrained checkpoint".into()))?;
            finetune(cfg, pool, &Checkpoint::load(path)?)
        }
    }
}

/// Metrics of the checkpointed model on the test split of `ds`, without
/// any parameter update.
pub fn zero_shot_eval(ck: &Checkpoint, ds: &Dataset, opts: PhysicsOptions) -> Result<MetricBundle> {
    let model = model_from_checkpoint(ck)?;
    Prepared::new(ds, opts)?.evaluate_split(&model, Split::Test, opts)
}

/// Predictions of the checkpointed model on the given samples.
pub fn predict_samples(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<Vec<SystemState>> {
    let prep = Prepared::new(ds, PhysicsOptions::default())?;
    idx.iter()
        .map(|&i| model.predict_state(&prep.topo, &prep.inputs[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 when only one report was given.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    /// Set when `n == 1` and `std` carries no information.
    pub std_undefined: bool,
    pub seeds: Vec<u64>,
    /// case id -> metric name -> statistics.
    pub metrics: BTreeMap<String, BTreeMap<String, MeanStd>>,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

fn metric_fields(m: &MetricBundle) -> [(&'static str, f64); 7] {
    [
        ("mse", m.mse),
        ("viol_power_balance", m.viol.viol_power_balance),
        ("viol_line", m.viol.viol_line),
        ("viol_total_normalized", m.viol.viol_total_normalized),
        ("validation_score", m.validation_score),
        ("cost_diff_abs", m.cost_diff_abs),
        ("cost_diff_pct", m.cost_diff_pct.unwrap_or(f64::NAN)),
    ]
}

/// Mean and sample standard deviation of every test metric across reports
/// that differ only in their seed.
pub fn aggregate_seeds(reports: &[RunReport]) -> Result<SeedSummary> {
    let first = reports.first().ok_or(Error::EmptySampleSet)?;
    let strip = |r: &RunReport| {
        let mut c = r.config.clone();
        c.seed = 0;
        c
    };
    let base = strip(first);
    for r in &reports[1..] {
        if strip(r) != base {
            return Err(Error::HeterogeneousConfigs(format!(
                "seed {} and seed {} differ beyond the seed",
                first.config.seed, r.config.seed
            )));
        }
        let ids = |r: &RunReport| r.metrics.iter().map(|m| m.case_id.clone()).collect::<Vec<_>>();
        if ids(r) != ids(first) {
            return Err(Error::HeterogeneousConfigs("reports cover different cases".into()));
        }
    }
    let mut metrics = BTreeMap::new();
    for (k, m0) in first.metrics.iter().enumerate() {
        let mut per = BTreeMap::new();
        for (j, (name, _)) in metric_fields(m0).iter().enumerate() {
            let xs: Vec<f64> = reports.iter().map(|r| metric_fields(&r.metrics[k])[j].1).collect();
            if xs.iter().all(|x| x.is_finite()) {
                per.insert(name.to_string(), mean_std(&xs));
            }
        }
        metrics.insert(m0.case_id.clone(), per);
    }
    Ok(SeedSummary {
        n: reports.len(),
        std_undefined: reports.len() == 1,
        seeds: reports.iter().map(|r| r.config.seed).collect(),
        metrics,
    })
}
