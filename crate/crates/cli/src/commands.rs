use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gridbench::diagnostics::{self, ActivationDump, DEFAULT_PROBE_TRAIN_FRACTION};
use gridbench::grid::{validate_case, GridCase, NodeType, OperatingPoint};
use gridbench::harness::{self, DataPool, RunConfig, RunOutput, RunReport, Task};
use gridbench::ingest::{self, Dataset, DatasetManifest, DEFAULT_RATIOS};
use gridbench::metrics::{self, ViolationSummary};
use gridbench::models::checkpoint::Checkpoint;
use gridbench::models::ModelKind;
use gridbench::objectives::ObjectiveKind;
use gridbench::physics::{full_residuals, Demand, PhysicsOptions, SystemState};
use gridbench::{Error, Result};
use serde_json::json;

use crate::config::{self, CliConfigFile, RunSection};
use crate::{Cli, Command, RunArgs};

pub fn dispatch(cli: Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let file = match &cli.config {
        Some(p) => config::load(p)?,
        None => CliConfigFile::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out = cli.out.clone().or_else(|| file.out.clone());
    match cli.command {
        Command::Validate { cases } => validate(&cases),
        Command::Split { case, ratios } => {
            let ratios = match ratios {
                Some(r) => r
                    .try_into()
                    .map_err(|r: Vec<f64>| Error::BadRatios(format!("expected 3 ratios, got {}", r.len())))?,
                None => file.data.ratios.unwrap_or(DEFAULT_RATIOS),
            };
            split(&case, ratios, seed, out.as_deref())
        }
        Command::Eval { case, solution } => eval(&case, &solution),
        Command::Train(args) => {
            let task = file.run.task;
            run(&file, &args, task, false, seed, cli.threads, out)
        }
        Command::Task { task, run: args } => {
            let task = match task {
                Some(t) => Some(t.parse::<Task>()?),
                None => file.run.task,
            };
            if task.is_none() {
                return Err(Error::Config("no task given: pass --task or set run.task".into()));
            }
            run(&file, &args, task, true, seed, cli.threads, out)
        }
        Command::Zeroshot { checkpoint, cases } => {
            let ratios = file.data.ratios.unwrap_or(DEFAULT_RATIOS);
            let split_seed = file.data.split_seed.unwrap_or(seed);
            zeroshot(&checkpoint, &cases, ratios, split_seed, out.as_deref())
        }
        Command::Probe {
            checkpoint,
            case,
            samples,
            lambda,
        } => probe(&checkpoint, &case, samples, lambda, seed),
        Command::Report { runs, scaling } => report(&runs, scaling),
        Command::Synth {
            buses,
            samples,
            case_id,
        } => synth(buses, samples, case_id, seed, out.as_deref()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn validate(cases: &[PathBuf]) -> Result<()> {
    for path in cases {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (case, samples) = match ingest::parse_case_file(&bytes) {
            Ok(x) => x,
            Err(Error::InvalidCase(_)) => {
                // Report every finding, not just the first.
                let doc: serde_json::Value = serde_json::from_slice(&bytes)?;
                let case: GridCase = serde_json::from_value(doc["grid"].clone())?;
                let report = validate_case(&case);
                for f in &report.findings {
                    eprintln!("{}: {:?}: {}", path.display(), f.kind, f.message);
                }
                return Err(Error::InvalidCase(format!(
                    "{}: {} finding(s)",
                    path.display(),
                    report.findings.len()
                )));
            }
            Err(e) => return Err(e),
        };
        println!(
            "OK {} buses={} generators={} branches={} samples={}",
            case.case_id,
            case.bus_count(),
            case.generators.len(),
            case.branches.len(),
            samples.len()
        );
    }
    Ok(())
}

fn split(case_path: &Path, ratios: [f64; 3], seed: u64, out: Option<&Path>) -> Result<()> {
    let (case, samples) = ingest::read_case_file(case_path)?;
    let manifest = DatasetManifest {
        case_id: case.case_id.clone(),
        sample_paths: vec![absolute(case_path)],
        split: ingest::make_splits(samples.len(), ratios, seed)?,
    };
    match out {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join(format!("{}.manifest.json", case.case_id));
            ingest::write_json(&path, &manifest)?;
            println!("{}", path.display());
        }
        None => print_json(&manifest)?,
    }
    Ok(())
}

fn read_solutions(path: &Path) -> Result<Vec<SystemState>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value = serde_json::from_slice(&bytes)?;
    let wrap = |e: serde_json::Error| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    match doc {
        serde_json::Value::Array(_) => serde_json::from_value(doc).map_err(wrap),
        serde_json::Value::Object(ref o) if o.contains_key("solutions") => {
            serde_json::from_value(o["solutions"].clone()).map_err(wrap)
        }
        _ => Ok(vec![serde_json::from_value(doc).map_err(wrap)?]),
    }
}

/// Solutions are paired with the case's samples when it has them, otherwise
/// scored against the base demand.
fn eval(case_path: &Path, solution_path: &Path) -> Result<()> {
    let (case, samples) = ingest::read_case_file(case_path)?;
    let preds = read_solutions(solution_path)?;
    if preds.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    for p in &preds {
        p.check_dims(&case)?;
    }
    let opts = PhysicsOptions::default();
    if samples.is_empty() {
        let demand = Demand::base(&case);
        let sets = preds
            .iter()
            .map(|p| full_residuals(&case, &demand, p, opts))
            .collect::<Result<Vec<_>>>()?;
        let viol = ViolationSummary::from_residuals(&sets, case.bus_count(), false)?;
        return print_json(&json!({
            "case_id": case.case_id,
            "samples": preds.len(),
            "viol": viol,
        }));
    }
    if samples.len() != preds.len() {
        return Err(Error::DimensionMismatch {
            field: "solutions".into(),
            expected: samples.len(),
            got: preds.len(),
        });
    }
    print_json(&metrics::evaluate(&case, &samples, &preds, opts)?)
}

/// Fully resolved inputs of a `train` or `task` run.
struct Resolved {
    file: CliConfigFile,
    run: RunConfig,
    pool: DataPool,
    out: PathBuf,
}

fn parse_objective(s: &str) -> Result<ObjectiveKind> {
    s.parse()
}

fn parse_model(s: &str) -> Result<ModelKind> {
    serde_json::from_value(json!(s.to_ascii_lowercase()))
        .map_err(|_| Error::Config(format!("unknown model kind `{s}`")))
}

fn load_pool(
    cases: &[PathBuf],
    manifests: &[PathBuf],
    ratios: [f64; 3],
    split_seed: u64,
) -> Result<(DataPool, Vec<String>)> {
    let mut pool = DataPool::new();
    let mut order = Vec::new();
    let mut add = |ds: Dataset, pool: &mut DataPool| -> Result<()> {
        let id = ds.case_id().to_string();
        if pool.insert(id.clone(), ds).is_some() {
            return Err(Error::Config(format!("case `{id}` is loaded twice")));
        }
        order.push(id);
        Ok(())
    };
    for p in cases {
        let (case, samples) = ingest::read_case_file(p)?;
        add(Dataset::with_ratios(case, samples, ratios, split_seed)?, &mut pool)?;
    }
    for m in manifests {
        add(Dataset::load(m)?, &mut pool)?;
    }
    Ok((pool, order))
}

fn resolve(
    file: &CliConfigFile,
    args: &RunArgs,
    task: Option<Task>,
    seed: u64,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> Result<Resolved> {
    let mut data = file.data.clone();
    let mut section = file.run.clone();
    if !args.cases.is_empty() || !args.eval_cases.is_empty() {
        data.cases = args.cases.iter().chain(&args.eval_cases).cloned().collect();
    }
    let ratios = data.ratios.unwrap_or(DEFAULT_RATIOS);
    let split_seed = data.split_seed.unwrap_or(seed);
    let (pool, _) = load_pool(&data.cases, &data.manifests, ratios, split_seed)?;
    let id_of = |p: &PathBuf| -> Result<String> { Ok(ingest::read_case_file(p)?.0.case_id) };
    if !args.cases.is_empty() {
        section.train_cases = Some(args.cases.iter().map(id_of).collect::<Result<_>>()?);
    }
    if !args.eval_cases.is_empty() {
        section.eval_cases = Some(args.eval_cases.iter().map(id_of).collect::<Result<_>>()?);
    }
    let eval_ids = section.eval_cases.clone().unwrap_or_default();
    let train_ids = section.train_cases.clone().unwrap_or_else(|| {
        pool.keys().filter(|k| !eval_ids.contains(k)).cloned().collect()
    });
    if pool.is_empty() {
        return Err(Error::DataMissing("no cases given: pass --case or set data.cases".into()));
    }
    let task = task.unwrap_or(if train_ids.len() == 1 { Task::T1 } else { Task::T2 });
    let objective = match &args.objective {
        Some(o) => Some(parse_objective(o)?),
        None => section.objective.as_ref().map(|o| o.kind),
    }
    .unwrap_or(ObjectiveKind::Mse);
    let mut model = section.model.clone().unwrap_or_else(config::default_model);
    if let Some(m) = &args.model {
        let kind = parse_model(m)?;
        if kind != model.kind {
            let heads = if kind.uses_heads() { model.heads.max(2) } else { 1 };
            model.kind = kind;
            model.heads = heads;
        }
    }
    let mut run = section.resolve(RunConfig::new(task, model.clone(), objective, train_ids));
    run.task = task;
    run.model = model;
    run.objective.kind = objective;
    run.seed = seed;
    if let Some(b) = args.budget {
        run.budget_samples = b;
    }
    if let Some(w) = args.cost_weight {
        run.cost_weight = w;
    }
    if let Some(c) = &args.checkpoint {
        run.pretrained = Some(c.clone());
    }
    run.pretrained = run.pretrained.as_deref().map(absolute);
    run.validate()?;
    let out = out.ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    data.cases = data.cases.iter().map(|p| absolute(p)).collect();
    data.manifests = data.manifests.iter().map(|p| absolute(p)).collect();
    data.ratios = Some(ratios);
    data.split_seed = Some(split_seed);
    let resolved_file = CliConfigFile {
        schema_version: config::CONFIG_SCHEMA_VERSION,
        seed: Some(seed),
        threads: Some(threads.or(file.threads).unwrap_or(1)),
        out: None,
        data,
        run: RunSection::from_resolved(&run),
    };
    let run = resolved_file.run.resolve(run);
    Ok(Resolved {
        file: resolved_file,
        run,
        pool,
        out,
    })
}

fn run(
    file: &CliConfigFile,
    args: &RunArgs,
    task: Option<Task>,
    any_task: bool,
    seed: u64,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let r = resolve(file, args, task, seed, threads, out)?;
    if !any_task && r.run.task == Task::T4 {
        return Err(Error::Config("`train` does not fine-tune; use `task --task T4`".into()));
    }
    create_dir(&r.out)?;
    ingest::write_json(&r.out.join("run.json"), &r.file)?;
    eprintln!(
        "running {:?} {} {} on {:?} for {} samples",
        r.run.task, r.run.model.kind, r.run.objective.kind, r.run.train_cases, r.run.budget_samples
    );
    let output: RunOutput = if any_task {
        harness::run_task(&r.run, &r.pool)?
    } else {
        harness::train(&r.run, &r.pool)?
    };
    write_outputs(&r.out, &output)?;
    for m in &output.report.metrics {
        print_json(m)?;
    }
    Ok(())
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    ingest::write_json(&dir.join("report.json"), &out.report)?;
    write_text(&dir.join("curve.csv"), &out.report.curve_csv())?;
    if let Some(t) = &out.report.transfer {
        write_text(&dir.join("scratch_curve.csv"), &harness::curve_csv(&t.scratch_curve))?;
    }
    out.checkpoint.save(&dir.join("model.ckpt"))?;
    ingest::write_json(&dir.join("timing.json"), &json!({ "wall_seconds": out.wall_seconds }))
}

fn zeroshot(ck_path: &Path, cases: &[PathBuf], ratios: [f64; 3], split_seed: u64, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let (pool, order) = load_pool(cases, &[], ratios, split_seed)?;
    if let Some(trained) = ck.header["run_config"]["train_cases"].as_array() {
        if let Some(id) = order.iter().find(|id| trained.iter().any(|t| t.as_str() == Some(id))) {
            return Err(Error::Leakage(id.clone()));
        }
    }
    let mut bundles = Vec::new();
    for id in &order {
        let m = harness::zero_shot_eval(&ck, &pool[id], PhysicsOptions::default())?;
        print_json(&m)?;
        bundles.push(m);
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        ingest::write_json(&dir.join("zeroshot.json"), &bundles)?;
    }
    Ok(())
}

/// Targets decoded from bus rows: degree, hop distance to the slack and the
/// solved voltage magnitude.
fn probe(ck_path: &Path, case_path: &Path, samples: usize, lambda: f64, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let model = harness::model_from_checkpoint(&ck)?;
    let (case, ops) = ingest::read_case_file(case_path)?;
    let ops: Vec<OperatingPoint> = if ops.is_empty() {
        return Err(Error::EmptySampleSet);
    } else {
        ops.into_iter().take(samples.max(1)).collect()
    };
    let ids: Vec<usize> = (0..ops.len()).collect();
    let dump = ActivationDump::collect(&model, &case, &ops, &ids)?;
    let rows = dump.rows_of(NodeType::Bus);
    let slack = diagnostics::slack_distance(&case);
    let targets: Vec<(&str, Vec<Option<f64>>)> = vec![
        ("degree", rows.iter().map(|&r| Some(dump.nodes[r].degree as f64)).collect()),
        (
            "slack_distance",
            rows.iter().map(|&r| slack[dump.nodes[r].index].map(|d| d as f64)).collect(),
        ),
        (
            "v",
            rows.iter()
                .map(|&r| Some(ops[dump.nodes[r].sample].labels.v[dump.nodes[r].index]))
                .collect(),
        ),
    ];
    let mut lines = Vec::new();
    for (layer, acts) in dump.layers.iter().enumerate() {
        for (name, ys) in &targets {
            let keep: Vec<usize> = (0..rows.len()).filter(|&k| ys[k].is_some()).collect();
            let x = diagnostics::select_rows(acts, &keep.iter().map(|&k| rows[k]).collect::<Vec<_>>())?;
            let y: Vec<f64> = keep.iter().map(|&k| ys[k].expect("kept")).collect();
            let (train, held) = diagnostics::disjoint_split(y.len(), DEFAULT_PROBE_TRAIN_FRACTION, seed);
            let cell = |r: Result<String>| -> Result<String> {
                match r {
                    Ok(s) => Ok(s),
                    Err(e @ (Error::SingularSystem | Error::ZeroVariance(_) | Error::DegenerateData(_) | Error::EmptySampleSet)) => {
                        eprintln!("layer {layer} {name}: {e}");
                        Ok(String::new())
                    }
                    Err(e) => Err(e),
                }
            };
            let fit = diagnostics::linear_probe(&x, &y, &train, &held, lambda);
            let (r2_train, r2_held) = match fit {
                Ok(f) => (f.r_squared_train.to_string(), f.r_squared_heldout.to_string()),
                Err(e) => (cell(Err(e))?, String::new()),
            };
            let pca1 = cell(diagnostics::Pca::fit(&x, 1).map(|p| p.explained_variance_ratio[0].to_string()))?;
            lines.push(vec![layer.to_string(), name.to_string(), r2_train, r2_held, pca1]);
        }
    }
    print!(
        "{}",
        diagnostics::csv(&["layer", "target", "r2_train", "r2_heldout", "pca1_ratio"], lines)
    );
    Ok(())
}

fn report(runs: &[PathBuf], scaling: bool) -> Result<()> {
    let mut reports = Vec::new();
    for dir in runs {
        let path = dir.join("report.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let r: RunReport = serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        reports.push(r);
    }
    let mut doc = BTreeMap::new();
    if scaling {
        let points: Vec<(f64, f64)> = reports
            .iter()
            .flat_map(|r| &r.metrics)
            .map(|m| (m.bus_count as f64, m.viol.viol_total_normalized))
            .collect();
        doc.insert("scaling", serde_json::to_value(diagnostics::fit_scaling_exponent(&points)?)?);
    } else {
        doc.insert("seeds", serde_json::to_value(harness::aggregate_seeds(&reports)?)?);
    }
    print_json(&doc)
}

fn synth(buses: usize, samples: usize, case_id: Option<String>, seed: u64, out: Option<&Path>) -> Result<()> {
    if !(2..=64).contains(&buses) {
        return Err(Error::Config(format!("--buses {buses} outside 2..=64")));
    }
    if samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let id = case_id.unwrap_or_else(|| format!("syn{buses}"));
    let (case, ops) = gridbench_fixtures::family(&gridbench_fixtures::FamilySpec::new(&id, buses, samples, seed));
    let dir = out.unwrap_or(Path::new("."));
    create_dir(dir)?;
    let path = dir.join(format!("{id}.json"));
    ingest::write_case_file(&path, &case, &ops)?;
    println!("{}", path.display());
    Ok(())
}
