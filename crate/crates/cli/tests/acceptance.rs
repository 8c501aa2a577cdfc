//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use gridbench::diagnostics::{self, NodeErrors, Pca};
use gridbench::grid::{permute_case, CasePermutation, GridCase, OperatingPoint};
use gridbench::harness::{self, DataPool, RunConfig, Task};
use gridbench::ingest::Dataset;
use gridbench::metrics::ViolationSummary;
use gridbench::models::checkpoint::Checkpoint;
use gridbench::models::{
    encode, init_params, prepare, predict, Mode, Model, ModelConfig, ModelKind, ParamVars, TopoVars,
};
use gridbench::objectives::{
    ascent_step, loss_al, loss_mse, loss_vbl, tape_residuals, update_duals, CaseDual, DualSchedule, DualState,
    ObjectiveKind, ResidualPlan, ResidualSample,
};
use gridbench::physics::{box_residuals, branch_flow, full_residuals, Demand, PhysicsOptions, SystemState};
use gridbench::rng::Rng;
use gridbench_autodiff::{finite_difference_report, Tape, Tensor, Var};
use gridbench_fixtures::{family, solved_cases, three_bus_family, two_bus_family, FamilySpec};

type Outcome = Result<String, String>;

const OBJECTIVES: [ObjectiveKind; 3] = [ObjectiveKind::Mse, ObjectiveKind::Al, ObjectiveKind::Vbl];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("physics oracle", physics_oracle),
        ("branch-flow point check", branch_flow_point),
        ("gradient audit", gradient_audit),
        ("replication invariance", replication_invariance),
        ("box feasibility", box_feasibility),
        ("dual correctness", dual_correctness),
        ("permutation equivariance", permutation_equivariance),
        ("objective ordering on 3-bus family", objective_ordering),
        ("transfer fine-tuning", transfer_finetuning),
        ("scaling fit self-test", scaling_fit),
        ("task determinism", task_determinism),
        ("diagnostics", diagnostics_checks),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("PASS {id:>2} {name}: {d} [{secs:.2}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {d} [{secs:.2}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn physics_oracle() -> Outcome {
    let start = Instant::now();
    let fixtures = solved_cases(24, 2024);
    let mut worst = 0.0_f64;
    let mut worst_viol = 0.0_f64;
    let mut sizes = std::collections::BTreeSet::new();
    for (case, op) in &fixtures {
        sizes.insert(case.bus_count());
        let set = full_residuals(
            case,
            &Demand::for_point(case, op),
            &SystemState::from(&op.labels),
            PhysicsOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let (bal, line, bx) = set.max_by_family();
        worst = worst.max(bal).max(line).max(bx);
        let v = ViolationSummary::from_residuals(&[set], case.bus_count(), false).map_err(|e| e.to_string())?;
        worst_viol = worst_viol.max(v.viol_total_normalized);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        fixtures.len() >= 20 && sizes == (2..=5).collect() && worst <= 1e-6 && worst_viol <= 1e-6 && secs < 1.0,
        format!(
            "{} fixtures over {:?} buses, max residual {worst:.2e}, max Viol {worst_viol:.2e}, {secs:.3}s",
            fixtures.len(),
            sizes
        ),
    )
}

/// Independent oracle for the flow formulas, evaluated term by term.
fn flow_oracle(vi: f64, vj: f64, t: f64, g: f64, b: f64) -> (f64, f64) {
    let (s, c) = t.sin_cos();
    let p = vi * vi * g - vi * vj * g * c - vi * vj * b * s;
    let q = -vi * vi * b - vi * vj * g * s + vi * vj * b * c;
    (p, q)
}

fn branch_flow_point() -> Outcome {
    let (p, q) = branch_flow(1.05, 1.0, 0.1, 2.0, -10.0);
    let (po, qo) = flow_oracle(1.05, 1.0, 0.1, 2.0, -10.0);
    // Frozen oracle values; the active power also matches the reference 1.163742.
    const P_REF: f64 = 1.163_742_13;
    const Q_REF: f64 = 0.367_806_09;
    let ok = (p - P_REF).abs() <= 1e-6
        && (q - Q_REF).abs() <= 1e-6
        && (p - po).abs() <= 1e-12
        && (q - qo).abs() <= 1e-12
        && (p - 1.163742).abs() <= 1e-6;
    check(
        ok,
        format!(
            "P={p:.9} Q={q:.9}; oracle ({po:.9}, {qo:.9}); deviation of Q from the reference value 0.367808 is {:.2e}",
            (q - 0.367808).abs()
        ),
    )
}

fn random_dual(plan: &ResidualPlan, rng: &mut Rng) -> CaseDual {
    let mut d = CaseDual::for_plan(plan);
    d.lambda.iter_mut().for_each(|l| *l = 2.0 * rng.uniform() - 1.0);
    d.mu.iter_mut().for_each(|m| *m = rng.uniform());
    d
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let (case, ops) = family(&FamilySpec::new("fd5", 5, 20, 31));
    let plan = ResidualPlan::new(&case, PhysicsOptions::default());
    let mut rng = Rng::new(5, 77);
    let (mut worst, mut reports, mut excluded) = (0.0_f64, 0, 0);
    let eps = 1e-6;
    for kind in ModelKind::ALL {
        let mut cfg = ModelConfig::new(kind, 1, 4);
        cfg.leaky_relu_slope = 0.2;
        let mut draws = 0;
        let mut tries = 0;
        while draws < 50 {
            tries += 1;
            if tries > 500 {
                return Err(format!("{kind}: too many draws near kinks"));
            }
            let seed = rng.next_u64();
            let op = &ops[(seed % ops.len() as u64) as usize];
            let (topo, inputs) = prepare(&case, op).map_err(|e| e.to_string())?;
            let demand = Demand::for_point(&case, op);
            let scale = 0.5 + 1.5 * rng.uniform();
            let params = init_params(&cfg, seed).map_err(|e| e.to_string())?.map(|t| t.scale(scale));
            let points: Vec<Tensor> = params.tensors.values().cloned().collect();
            let dual = random_dual(&plan, &mut rng);
            let rho = 0.1 + rng.uniform();
            let mut errs = Vec::new();
            let mut near_kink = false;
            for obj in OBJECTIVES {
                let f = |tape: &mut Tape, vars: &[Var]| -> gridbench::Result<Var> {
                    let p = ParamVars::from_slice(&params, vars);
                    let tv = TopoVars::new(tape, &topo);
                    let e = encode(tape, &cfg, &p, &topo, &tv, &inputs, Mode::Eval, false)?;
                    let y = predict(tape, &p, &topo, &tv, &e)?;
                    let res = tape_residuals(tape, &plan, &demand, &y)?;
                    let l = match obj {
                        ObjectiveKind::Mse => loss_mse(tape, &y, &op.labels)?,
                        ObjectiveKind::Al => loss_al(tape, &y, &op.labels, &res, &dual, rho, false)?,
                        ObjectiveKind::Vbl => loss_vbl(tape, &y, &op.labels, &res, &dual)?,
                    };
                    Ok(l.total)
                };
                let rep = finite_difference_report(f, &points, eps).map_err(|e| e.to_string())?;
                if rep.min_kink_distance <= 100.0 * eps {
                    near_kink = true;
                    break;
                }
                errs.push(rep.max_rel_error);
            }
            if near_kink {
                excluded += 1;
                continue;
            }
            worst = errs.into_iter().fold(worst, f64::max);
            reports += OBJECTIVES.len();
            draws += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && secs < 60.0,
        format!("{reports} audits (6 kinds x 3 losses x 50 draws), max rel error {worst:.2e}, {excluded} draws near kinks redrawn"),
    )
}

fn perturbed(state: &SystemState, rng: &mut Rng, amount: f64) -> SystemState {
    let mut jitter = |xs: &[f64]| xs.iter().map(|x| x + amount * rng.normal()).collect::<Vec<_>>();
    SystemState {
        v: jitter(&state.v),
        theta: jitter(&state.theta),
        p_g: jitter(&state.p_g),
        q_g: jitter(&state.q_g),
    }
}

fn replicate_state(s: &SystemState, k: usize) -> SystemState {
    let rep = |v: &[f64]| -> Vec<f64> { (0..k).flat_map(|_| v.iter().copied()).collect() };
    SystemState {
        v: rep(&s.v),
        theta: rep(&s.theta),
        p_g: rep(&s.p_g),
        q_g: rep(&s.q_g),
    }
}

fn viol_of(case: &GridCase, ops: &[OperatingPoint], states: &[SystemState]) -> gridbench::Result<ViolationSummary> {
    let sets = ops
        .iter()
        .zip(states)
        .map(|(op, s)| full_residuals(case, &Demand::for_point(case, op), s, PhysicsOptions::default()))
        .collect::<gridbench::Result<Vec<_>>>()?;
    ViolationSummary::from_residuals(&sets, case.bus_count(), false)
}

fn replication_invariance() -> Outcome {
    let mut rng = Rng::new(9, 1);
    let mut worst = 0.0_f64;
    let mut base_min = f64::INFINITY;
    for buses in [3, 4, 5] {
        let (mut case, ops) = family(&FamilySpec::new("rep", buses, 10, 40 + buses as u64));
        // Tight limits so the line family contributes as well.
        for b in &mut case.branches {
            b.s_max *= 0.7;
        }
        let states: Vec<SystemState> = ops.iter().map(|o| perturbed(&(&o.labels).into(), &mut rng, 0.02)).collect();
        let base = viol_of(&case, &ops, &states).map_err(|e| e.to_string())?;
        base_min = base_min.min(base.viol_line).min(base.viol_power_balance);
        for k in [2, 3, 5] {
            let rc = case.replicate(k);
            let rops: Vec<OperatingPoint> = ops.iter().map(|o| o.replicate(&case, k)).collect();
            let rstates: Vec<SystemState> = states.iter().map(|s| replicate_state(s, k)).collect();
            let rv = viol_of(&rc, &rops, &rstates).map_err(|e| e.to_string())?;
            worst = worst.max((rv.viol_total_normalized - base.viol_total_normalized).abs());
        }
    }
    check(
        worst <= 1e-9 && base_min > 0.0,
        format!("k in {{2,3,5}} on 3 families, max |dViol| {worst:.2e}, smallest base family Viol {base_min:.3e}"),
    )
}

fn box_feasibility() -> Outcome {
    let (case, ops) = family(&FamilySpec::new("box", 5, 10, 8));
    let prepared: Vec<_> = ops.iter().map(|o| prepare(&case, o).unwrap()).collect();
    let mut rng = Rng::new(3, 5);
    let slack = case.slack_bus().unwrap();
    let mut worst = 0.0_f64;
    let mut slack_ok = true;
    for draw in 0..1000 {
        let kind = ModelKind::ALL[draw % 6];
        let cfg = ModelConfig::new(kind, 2, 8);
        let scale = (rng.uniform() * 100f64.ln()).exp();
        let params = init_params(&cfg, rng.next_u64()).unwrap().map(|t| t.scale(scale));
        let model = Model { config: cfg, params };
        let (topo, inputs) = &prepared[draw % prepared.len()];
        let s = model.predict_state(topo, inputs).map_err(|e| e.to_string())?;
        worst = worst.max(box_residuals(&case, &s).map_err(|e| e.to_string())?.max());
        slack_ok &= s.theta[slack] == 0.0;
    }
    check(
        worst == 0.0 && slack_ok,
        format!("1000 draws, parameter scale up to 100x, max box residual {worst:e}, slack angle pinned: {slack_ok}"),
    )
}

fn dual_correctness() -> Outcome {
    let mut rng = Rng::new(12, 3);
    // Fuzzed sequences under random schedules.
    let (eq, ineq) = (6, 3);
    let key = "fz";
    let zero_plan = |d: &mut DualState| {
        d.cases.insert(key.to_string(), CaseDual::zeros(eq, ineq));
    };
    let mut min_mu = f64::INFINITY;
    let mut steps = 0;
    for kind in [ObjectiveKind::Al, ObjectiveKind::Vbl] {
        let schedule = DualSchedule {
            warmup_samples: 64,
            multiplier_check_samples: 48,
            penalty_check_samples: 500,
        };
        let mut d = DualState::new(0.3, 0.5, schedule).unwrap();
        d.rho_growth = 1.0001;
        zero_plan(&mut d);
        let mut seen = 0;
        for _ in 0..5000 {
            let n = 1 + (rng.next_u64() % 16) as usize;
            let scale = (rng.uniform() * 6.0 - 3.0).exp();
            let batch: Vec<ResidualSample> = (0..n)
                .map(|_| ResidualSample {
                    r: (0..eq).map(|_| scale * rng.normal()).collect(),
                    h: (0..ineq).map(|_| scale * rng.normal()).collect(),
                })
                .collect();
            seen += n as u64;
            update_duals(kind, &mut d, key, &batch, seen).map_err(|e| e.to_string())?;
            steps += 1;
            let c = &d.cases[key];
            min_mu = c.mu.iter().copied().fold(min_mu, f64::min);
            if c.mu.iter().chain(&c.lambda).any(|x| !x.is_finite()) {
                return Err("non-finite multiplier".into());
            }
            if kind == ObjectiveKind::Vbl && c.lambda.iter().any(|&l| l < 0.0) {
                return Err("VBL lambda went negative".into());
            }
        }
    }

    // Single ascent steps against the closed-form updates.
    let mut step_err = 0.0_f64;
    for _ in 0..1000 {
        let rho = rng.uniform() * 2.0;
        let mut d = CaseDual::zeros(eq, ineq);
        d.lambda.iter_mut().for_each(|l| *l = rng.normal());
        d.mu.iter_mut().for_each(|m| *m = rng.uniform());
        let r: Vec<f64> = (0..eq).map(|_| rng.normal()).collect();
        let h: Vec<f64> = (0..ineq).map(|_| rng.normal()).collect();
        for kind in [ObjectiveKind::Al, ObjectiveKind::Vbl] {
            let mut got = d.clone();
            ascent_step(kind, &mut got, rho, &r, &h);
            for i in 0..eq {
                let want = match kind {
                    ObjectiveKind::Al => d.lambda[i] + rho * r[i],
                    _ => d.lambda[i] + rho * r[i].abs(),
                };
                step_err = step_err.max((got.lambda[i] - want).abs());
            }
            for i in 0..ineq {
                let want = match kind {
                    ObjectiveKind::Al => f64::max(0.0, d.mu[i] + rho * f64::max(h[i], 0.0)),
                    _ => d.mu[i] + rho * f64::max(h[i], 0.0),
                };
                step_err = step_err.max((got.mu[i] - want).abs());
            }
        }
    }
    // One scheduled update: interval mean, EMA, then the ascent step.
    let mut d = DualState::new(0.25, 0.4, DualSchedule::default()).unwrap();
    zero_plan(&mut d);
    let prior_r: Vec<f64> = (0..eq).map(|_| rng.normal()).collect();
    d.cases.get_mut(key).unwrap().ema_r = prior_r.clone();
    let batch: Vec<ResidualSample> = (0..5)
        .map(|_| ResidualSample {
            r: (0..eq).map(|_| rng.normal()).collect(),
            h: (0..ineq).map(|_| rng.normal()).collect(),
        })
        .collect();
    update_duals(ObjectiveKind::Al, &mut d, key, &batch, 5).map_err(|e| e.to_string())?;
    for i in 0..eq {
        let mean = batch.iter().map(|s| s.r[i]).sum::<f64>() / 5.0;
        let ema = 0.4 * prior_r[i] + 0.6 * mean;
        step_err = step_err.max((d.cases[key].lambda[i] - 0.25 * ema).abs());
    }

    // Warm-up leaves the state untouched, bit for bit.
    let schedule = DualSchedule {
        warmup_samples: 1000,
        multiplier_check_samples: 10,
        penalty_check_samples: 10,
    };
    let mut w = DualState::new(0.5, 0.2, schedule).unwrap();
    w.rho_growth = 2.0;
    zero_plan(&mut w);
    let before = serde_json::to_vec(&w).unwrap();
    let mut seen = 0;
    while seen + 10 < 1000 {
        seen += 10;
        update_duals(ObjectiveKind::Al, &mut w, key, &batch, seen).unwrap();
        update_duals(ObjectiveKind::Vbl, &mut w, key, &batch, seen).unwrap();
    }
    let warm_same = serde_json::to_vec(&w).unwrap() == before;

    check(
        min_mu >= 0.0 && step_err <= 1e-12 && warm_same && steps == 10_000,
        format!("{steps} fuzzed steps, min mu {min_mu:.3e}; max single-step error {step_err:.1e}; warm-up state identical: {warm_same}"),
    )
}

fn random_permutation(case: &GridCase, rng: &mut Rng) -> CasePermutation {
    CasePermutation {
        bus: rng.permutation(case.bus_count()),
        generator: rng.permutation(case.generators.len()),
        load: rng.permutation(case.loads.len()),
        shunt: rng.permutation(case.shunts.len()),
        branch: rng.permutation(case.branches.len()),
    }
}

fn permutation_equivariance() -> Outcome {
    let (mut case, ops) = family(&FamilySpec::new("perm8", 8, 4, 17));
    let op0 = &ops[1];
    case.loads = case.effective_loads(op0);
    let op = case.base_point(op0.labels.clone());
    let (t0, i0) = prepare(&case, &op).unwrap();
    let mut rng = Rng::new(21, 4);
    let models: Vec<Model> = ModelKind::ALL
        .iter()
        .map(|&k| {
            let mut cfg = ModelConfig::new(k, 2, 8);
            cfg.dropout = 0.1;
            Model::new(cfg, 13).unwrap()
        })
        .collect();
    let base: Vec<SystemState> = models.iter().map(|m| m.predict_state(&t0, &i0).unwrap()).collect();
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let perm = random_permutation(&case, &mut rng);
        let (pc, pop) = permute_case(&case, &op, &perm);
        let (t1, i1) = prepare(&pc, &pop).map_err(|e| e.to_string())?;
        for (m, a) in models.iter().zip(&base) {
            let b = m.predict_state(&t1, &i1).map_err(|e| e.to_string())?;
            for i in 0..case.bus_count() {
                let j = perm.bus[i];
                worst = worst.max((a.v[i] - b.v[j]).abs()).max((a.theta[i] - b.theta[j]).abs());
            }
            for (new, &old) in perm.generator.iter().enumerate() {
                worst = worst.max((a.p_g[old] - b.p_g[new]).abs()).max((a.q_g[old] - b.q_g[new]).abs());
            }
        }
    }
    check(
        worst <= 1e-9,
        format!("6 kinds x 100 permutations of an 8-bus case, max deviation {worst:.2e}"),
    )
}

fn single_pool(case: GridCase, ops: Vec<OperatingPoint>, seed: u64) -> DataPool {
    let ds = Dataset::with_ratios(case, ops, [0.8, 0.1, 0.1], seed).unwrap();
    BTreeMap::from([(ds.case_id().to_string(), ds)])
}

fn desk_config(task: Task, obj: ObjectiveKind, cases: &[&str], seed: u64, budget: u64) -> RunConfig {
    let mut c = RunConfig::new(
        task,
        ModelConfig::new(ModelKind::Gcn, 2, 16),
        obj,
        cases.iter().map(|s| s.to_string()).collect(),
    );
    c.budget_samples = budget;
    c.batch_size = 32;
    c.seed = seed;
    c.objective.schedule.multiplier_check_samples = 1000;
    c
}

fn objective_ordering() -> Outcome {
    let start = Instant::now();
    let (case, ops) = three_bus_family(500, 7);
    let mut means = Vec::new();
    for obj in OBJECTIVES {
        let mut total = 0.0;
        for seed in 0..5 {
            let pool = single_pool(case.clone(), ops.clone(), seed);
            let out = harness::train(&desk_config(Task::T1, obj, &["syn3"], seed, 50_000), &pool)
                .map_err(|e| e.to_string())?;
            total += out.report.metrics[0].viol.viol_total_normalized;
        }
        means.push(total / 5.0);
    }
    let secs = start.elapsed().as_secs_f64();
    let (m, a, v) = (means[0], means[1], means[2]);
    check(
        a <= m && v <= m && secs < 1800.0,
        format!("mean test Viol over 5 seeds at 50k samples: MSE {m:.4}, AL {a:.4}, VBL {v:.4}"),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn transfer_finetuning() -> Outcome {
    let start = Instant::now();
    let (c2, o2) = two_bus_family(500, 3);
    let (c3, o3) = three_bus_family(500, 7);
    let (mut ft, mut sc) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let mut pool = single_pool(c2.clone(), o2.clone(), seed);
        pool.extend(single_pool(c3.clone(), o3.clone(), seed));
        let pre = harness::train(&desk_config(Task::T1, ObjectiveKind::Al, &["syn2"], seed, 50_000), &pool)
            .map_err(|e| e.to_string())?;
        let cfg = desk_config(Task::T4, ObjectiveKind::Al, &["syn3"], seed, 20_000);
        let out = harness::finetune(&cfg, &pool, &pre.checkpoint).map_err(|e| e.to_string())?;
        let t = out.report.transfer.expect("T4 report carries a transfer summary");
        let inf = |x: Option<u64>| x.map_or(f64::INFINITY, |s| s as f64);
        ft.push(inf(t.finetune_samples));
        sc.push(inf(t.scratch_samples));
    }
    let secs = start.elapsed().as_secs_f64();
    let (f, s) = (median(ft.clone()), median(sc.clone()));
    check(
        f < s && secs < 1800.0,
        format!("samples to reach the scratch run's final val Viol, median of 5 seeds: fine-tune {f} vs scratch {s} (per seed {ft:?} vs {sc:?})"),
    )
}

fn scaling_fit() -> Outcome {
    let c = 0.037;
    let points: Vec<(f64, f64)> = [14.0, 30.0, 57.0, 118.0, 300.0, 1354.0]
        .iter()
        .map(|&n: &f64| (n, c * n.powf(1.40)))
        .collect();
    let fit = diagnostics::fit_scaling_exponent(&points).map_err(|e| e.to_string())?;
    check(
        (fit.exponent - 1.40).abs() <= 1e-6 && (fit.prefactor - c).abs() <= 1e-9,
        format!("exponent {:.12}, prefactor {:.12}", fit.exponent, fit.prefactor),
    )
}

fn task_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (c2, o2) = two_bus_family(60, 3);
    let (c3, o3) = three_bus_family(60, 7);
    let (c4, o4) = family(&FamilySpec::new("syn4", 4, 60, 9));
    let mut pool = single_pool(c2, o2, 1);
    pool.extend(single_pool(c3, o3, 1));
    pool.extend(single_pool(c4, o4, 1));
    let mut pre = desk_config(Task::T1, ObjectiveKind::Vbl, &["syn2"], 4, 1500);
    pre.model.dropout = 0.1;
    let pre_out = harness::train(&pre, &pool).map_err(|e| e.to_string())?;
    let ck_path = dir.path().join("pre.ckpt");
    pre_out.checkpoint.save(&ck_path).map_err(|e| e.to_string())?;

    let mut configs = Vec::new();
    let mut t1 = desk_config(Task::T1, ObjectiveKind::Al, &["syn3"], 4, 1500);
    t1.model = ModelConfig::new(ModelKind::Hgt, 2, 8);
    t1.model.dropout = 0.1;
    configs.push(t1);
    let mut t2 = desk_config(Task::T2, ObjectiveKind::Vbl, &["syn2", "syn3"], 4, 1500);
    t2.model = ModelConfig::new(ModelKind::Gat, 2, 8);
    t2.cost_weight = 0.1;
    configs.push(t2);
    let mut t3 = desk_config(Task::T3, ObjectiveKind::Al, &["syn2", "syn3"], 4, 1500);
    t3.eval_cases = vec!["syn4".into()];
    t3.model.dropout = 0.2;
    configs.push(t3);
    let mut t4 = pre.clone();
    t4.task = Task::T4;
    t4.train_cases = vec!["syn3".into()];
    t4.pretrained = Some(ck_path);
    configs.push(t4);

    let mut details = Vec::new();
    for cfg in &configs {
        let a = harness::run_task(cfg, &pool).map_err(|e| e.to_string())?;
        let b = harness::run_task(cfg, &pool).map_err(|e| e.to_string())?;
        let ra = serde_json::to_vec(&a.report).unwrap();
        let same_report = ra == serde_json::to_vec(&b.report).unwrap();
        let same_ck = a.checkpoint.to_bytes().unwrap() == b.checkpoint.to_bytes().unwrap();
        // The checkpoint also survives a disk round trip unchanged.
        let back = Checkpoint::from_bytes(&a.checkpoint.to_bytes().unwrap()).unwrap();
        let same_disk = back.to_bytes().unwrap() == a.checkpoint.to_bytes().unwrap();
        if !(same_report && same_ck && same_disk) {
            return Err(format!("{:?}: report {same_report}, checkpoint {same_ck}, reload {same_disk}", cfg.task));
        }
        details.push(format!("{:?} {}B", cfg.task, ra.len()));
    }
    Ok(format!("byte-identical reports and checkpoints for {}", details.join(", ")))
}

fn diagnostics_checks() -> Outcome {
    let mut rng = Rng::new(30, 2);
    // Points on a line through a random offset.
    let (n, d) = (40, 5);
    let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let off: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
    let mut data = Vec::new();
    for _ in 0..n {
        let t = 4.0 * rng.normal();
        data.extend((0..d).map(|j| off[j] + t * dir[j]));
    }
    let x = Tensor::from_vec(n, d, data).unwrap();
    let pca = Pca::fit(&x, 1).map_err(|e| e.to_string())?;
    let ratio = pca.explained_variance_ratio[0];

    // Exactly linear targets from generic features.
    let xs = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
    let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..n).map(|i| 0.7 + (0..d).map(|j| xs.data()[i * d + j] * w[j]).sum::<f64>()).collect();
    let (train, held) = diagnostics::disjoint_split(n, 0.5, 7);
    let probe = diagnostics::linear_probe(&xs, &y, &train, &held, 0.0).map_err(|e| e.to_string())?;

    // Errors proportional to normalized degree.
    let cases: Vec<NodeErrors> = [vec![1.0, 2.0, 3.0, 2.0, 1.0, 4.0], vec![2.0, 2.0, 1.0, 3.0]]
        .into_iter()
        .enumerate()
        .map(|(k, deg)| {
            let max = deg.iter().copied().fold(0.0, f64::max);
            NodeErrors {
                case_id: format!("c{k}"),
                errors: deg.iter().map(|x| x / max).collect(),
                degrees: deg,
            }
        })
        .collect();
    let r = diagnostics::degree_error_correlation(&cases).map_err(|e| e.to_string())?;

    check(
        (ratio - 1.0).abs() <= 1e-9
            && (probe.r_squared_train - 1.0).abs() <= 1e-9
            && (probe.r_squared_heldout - 1.0).abs() <= 1e-9
            && r == 1.0,
        format!(
            "PCA line ratio {ratio:.15}, probe R2 train {:.15} held-out {:.15}, degree-error r = {r:?}",
            probe.r_squared_train, probe.r_squared_heldout
        ),
    )
}
