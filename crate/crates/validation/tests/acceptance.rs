//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line each
//! with the measured values, and exits non-zero if any criterion fails.

use clap::Parser;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use twostage_cli::commands::{self, InterimInput};
use twostage_cli::Cli;
use twostage_core::inference::decompose;
use twostage_core::interim::InterimPolicy;
use twostage_core::model::*;
use twostage_core::optimiser::{rule_objectives, rule_objectives_under, Action, DecisionRule, Problem};
use twostage_core::par::{self, Mode};
use twostage_core::pareto::{ParetoPoint, PointStatus};
use twostage_core::sim::{replicate_rng, run_scenario, simulate_layout, InterimMode, Scenario, SimulationSummary};
use twostage_core::Error;
use twostage_validation::*;

const NULL_REPLICATES: usize = 50_000;

fn null_scenario(problem: &Problem, interim: InterimMode, seed: u64) -> Scenario {
    Scenario { truth: problem.model.corr, delta: 0.0, replicates: NULL_REPLICATES, seed, interim }
}

fn mode_name(m: InterimMode) -> &'static str {
    match m {
        InterimMode::Planned => "planned",
        InterimMode::Reestimate(_) => "re-estimated",
    }
}

fn fixed_design(id: usize, file: &str, power: (f64, f64), n: f64, cost: Option<f64>) -> Verdict {
    let title = if id == 1 { "parallel fixed-design benchmark" } else { "stepped-wedge fixed-design benchmark" };
    let mut c = Check::new(id, title);
    let t = Instant::now();
    let r = commands::power_report(&load(file), None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    c.require(within(r.power, power.0, power.1), format!("power {:.4} (want {} ± {})", r.power, power.0, power.1));
    c.require(r.max_participants == n, format!("N {} (want {n})", r.max_participants));
    if let Some(cost) = cost {
        c.require(r.max_cost == cost, format!("cost {} (want {cost})", r.max_cost));
    }
    c.require(secs < 1.0, format!("runtime {secs:.3} s (want < 1 s)"));
    if id == 1 {
        c.note(format!("{} = 2 arms x 24 clusters x 25; cost 2640 = 1200 + 48 x 30", r.max_participants));
    }
    c.finish()
}

fn criterion_3() -> (Verdict, Vec<ParetoPoint>) {
    let mut c = Check::new(3, "adaptive parallel reproduction");
    for (file, en, maxn) in [("parallel_adaptive.toml", 1162.0, 2120.0), ("parallel_budget.toml", 1107.0, 1680.0)] {
        let (problem, rule) = plan(&load(file));
        let o = rule_objectives(&problem, &rule).unwrap();
        let label = commands::describe(&problem.design);
        c.require(
            within_rel(o.expected_participants, en, 0.05),
            format!("{label}: E[N] {:.1} (want {en} ± 5%)", o.expected_participants),
        );
        c.require(
            within_rel(o.max_participants, maxn, 0.05),
            format!("{label}: max N {} (want {maxn} ± 5%)", o.max_participants),
        );
        let saving = 1.0 - o.expected_cost / 2640.0;
        c.require(
            (0.12..=0.22).contains(&saving),
            format!("{label}: E[cost] {:.1}, saving {:.1}% (want 12-22%)", o.expected_cost, 100.0 * saving),
        );
        c.note(format!("{label}: power {:.4}, boundary {:.4}, max cost {:.1}", o.power, rule.boundary, o.max_cost));
    }
    let t = Instant::now();
    let points = commands::pareto_points(&load("parallel_adaptive.toml")).unwrap();
    let secs = t.elapsed().as_secs_f64();
    c.require(secs < 600.0, format!("frontier search over {} designs: {secs:.1} s (want < 600 s)", points.len()));
    (c.finish(), points)
}

fn criterion_4() -> (Verdict, Vec<(String, f64, SimulationSummary)>) {
    let mut c = Check::new(4, "type I error with and without re-estimation");
    let mut budget_runs = Vec::new();
    for (file, seed) in [("parallel_adaptive.toml", 41), ("parallel_budget.toml", 42)] {
        let (problem, rule) = plan(&load(file));
        let label = commands::describe(&problem.design);
        let null = problem.query.with_truth(0.0, problem.info1.i1).unwrap();
        let analytic = rule_objectives_under(&problem, &rule, &null, &problem.candidates).unwrap().power;
        c.note(format!("{label} ({:?}): quadrature null rejection {analytic:.4}", rule.criterion));
        let cap = problem.cost1 + rule.calibration;
        for mode in [InterimMode::Planned, InterimMode::Reestimate(InterimPolicy::Estimate)] {
            let s = run_scenario(&problem, &rule, &null_scenario(&problem, mode, seed)).unwrap();
            let r = s.rejection;
            c.require(
                within(r.estimate, 0.05, 0.004),
                format!(
                    "{label} {}: rejection {:.4} (se {:.4}, {} failed replicates; want 0.05 ± 0.004)",
                    mode_name(mode),
                    r.estimate,
                    r.se,
                    s.failures
                ),
            );
            if rule.criterion == twostage_core::optimiser::Criterion::BudgetConstrained {
                budget_runs.push((format!("{label} null {}", mode_name(mode)), cap, s));
            }
        }
    }
    (c.finish(), budget_runs)
}

// Dense oracle for the stage-wise decomposition.

fn dense_xt(sigma: &DMatrix<f64>, nuisance: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let sigma_inv = sigma.clone().cholesky().expect("positive definite").inverse();
    let xtw = nuisance.transpose() * &sigma_inv;
    let beta = (&xtw * nuisance).pseudo_inverse(1e-12).unwrap() * (&xtw * x);
    x - nuisance * beta
}

fn period_matrix(cells: &[(usize, usize)], n_periods: usize) -> DMatrix<f64> {
    let used: Vec<usize> = (0..n_periods).filter(|t| cells.iter().any(|c| c.1 == *t)).collect();
    DMatrix::from_fn(cells.len(), used.len(), |i, j| if cells[i].1 == used[j] { 1.0 } else { 0.0 })
}

fn random_model(rng: &mut ChaCha20Rng, family: usize) -> CorrelationModel {
    let icc = rng.random_range(0.0..0.3);
    let second = rng.random_range(0.3..1.0);
    let disp = rng.random_range(0.5..3.0);
    match family {
        0 => CorrelationModel::exchangeable(icc, disp),
        1 => CorrelationModel::nested_exchangeable(icc, second, disp),
        _ => CorrelationModel::exponential_decay(icc, second, disp),
    }
    .unwrap()
}

fn random_layout(rng: &mut ChaCha20Rng) -> TrialLayout {
    let k = rng.random_range(2..=8);
    let t = rng.random_range(2..=6);
    let boundary = rng.random_range(1..t);
    let mut sizes = Vec::with_capacity(k * t);
    let mut treat = Vec::with_capacity(k * t);
    for _ in 0..k {
        let switch = rng.random_range(0..=t);
        let late = rng.random_bool(0.2);
        for p in 0..t {
            let m = if late && p < boundary || rng.random_bool(0.05) { 0 } else { rng.random_range(1..40) };
            sizes.push(m);
            treat.push(p >= switch);
        }
    }
    TrialLayout::new(k, t, sizes, treat, boundary).unwrap()
}

/// Score and information from stage-wise projections stacked and solved once
/// against the full covariance matrix.
fn dense_full(layout: &TrialLayout, cov: &WorkingCovariance, residuals: &[f64]) -> (f64, f64) {
    let (sigma, order) = cov.dense(layout);
    let n1 = layout.stage_cells(1).len();
    let x = DVector::from_iterator(order.len(), order.iter().map(|&(k, t)| layout.treated(k, t) as u8 as f64));
    let mut xt = x.clone();
    for (lo, n) in [(0, n1), (n1, order.len() - n1)] {
        if n == 0 {
            continue;
        }
        let block = sigma.view((lo, lo), (n, n)).into_owned();
        let nuisance = period_matrix(&order[lo..lo + n], layout.n_periods());
        xt.rows_mut(lo, n).copy_from(&dense_xt(&block, &nuisance, &x.rows(lo, n).into_owned()));
    }
    let cells = layout.cells();
    let r = DVector::from_iterator(
        order.len(),
        order.iter().map(|c| residuals[cells.iter().position(|d| d == c).unwrap()]),
    );
    let w = sigma.cholesky().expect("positive definite").solve(&xt);
    (w.dot(&r), w.dot(&xt))
}

fn criterion_5() -> Verdict {
    let mut c = Check::new(5, "score and information decomposition");
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut checked = [0usize; 3];
    let (mut worst_u, mut worst_i) = (0.0f64, 0.0f64);
    let mut attempts = 0;
    while checked.iter().any(|&n| n < 50) && attempts < 50_000 {
        attempts += 1;
        let family = attempts % 3;
        if checked[family] >= 50 {
            continue;
        }
        let layout = random_layout(&mut rng);
        let corr = random_model(&mut rng, family);
        let Ok(cov) = build_covariance(&layout, &corr, &OutcomeModel::gaussian()) else { continue };
        let residuals: Vec<f64> = (0..layout.cells().len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let stats = match decompose(&layout, &cov, &residuals) {
            Ok(s) if s.i1 > 1e-10 => s,
            Ok(_) | Err(Error::ZeroStageOneInformation | Error::RankDeficient(_) | Error::Singular(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        let (u, info) = dense_full(&layout, &cov, &residuals);
        worst_i = worst_i.max(((stats.i1 + stats.i2c) - info).abs() / info.abs());
        worst_u = worst_u.max(((stats.u1 + stats.u2c) - u).abs() / u.abs().max(info.sqrt()));
        checked[family] += 1;
    }
    let total: usize = checked.iter().sum();
    c.require(
        total >= 100 && checked.iter().all(|&n| n > 0),
        format!("{total} layouts (exchangeable {}, nested {}, decay {})", checked[0], checked[1], checked[2]),
    );
    c.require(worst_u < 1e-8, format!("max relative score error {worst_u:.2e} (want < 1e-8)"));
    c.require(worst_i < 1e-8, format!("max relative information error {worst_i:.2e} (want < 1e-8)"));
    c.require(c.elapsed() < 60.0, format!("runtime {:.1} s (want < 60 s)", c.elapsed()));
    c.finish()
}

fn criterion_6(mut runs: Vec<(String, f64, SimulationSummary)>) -> Verdict {
    let mut c = Check::new(6, "budget bound on realised cost");
    let add = |runs: &mut Vec<_>, cfg: twostage_cli::config::Config, replicates: usize, modes: &[InterimMode]| {
        let (problem, rule) = plan(&cfg);
        let cap = problem.cost1 + rule.calibration;
        for &mode in modes {
            let scenario =
                Scenario { truth: problem.model.corr, delta: problem.model.delta, replicates, seed: 6, interim: mode };
            let s = run_scenario(&problem, &rule, &scenario).unwrap();
            runs.push((format!("{} alternative {}", commands::describe(&problem.design), mode_name(mode)), cap, s));
        }
    };
    let both = [InterimMode::Planned, InterimMode::Reestimate(InterimPolicy::Estimate)];
    add(&mut runs, load("parallel_budget.toml"), 20_000, &both);
    add(
        &mut runs,
        load_edited(
            "stepped_wedge_adaptive.toml",
            &[("criterion = \"cost-penalised\"", "criterion = \"budget-constrained\"")],
        ),
        2_000,
        &both,
    );
    for (label, cap, s) in &runs {
        let over = s.records.iter().filter(|r| r.cost > *cap).count();
        c.require(
            over == 0,
            format!("{label}: {} replicates, max cost {} vs C1 + cap {cap}, {over} over", s.records.len(), s.max_cost),
        );
    }
    c.finish()
}

fn frontier_check(c: &mut Check, name: &str, points: &[ParetoPoint], objectives: usize) -> Vec<ParetoPoint> {
    let cfg = load(name);
    let objs = cfg.frontier_spec().unwrap().objectives;
    assert_eq!(objs.len(), objectives);
    let evaluated: Vec<&ParetoPoint> = points.iter().filter(|p| p.objectives.is_some()).collect();
    let vecs: Vec<Vec<f64>> =
        evaluated.iter().map(|p| objs.iter().map(|o| o.value(p.objectives.as_ref().unwrap())).collect()).collect();
    let oracle = brute_force_front(&vecs);
    let ours: Vec<usize> = (0..evaluated.len())
        .filter(|&i| matches!(evaluated[i].status, PointStatus::Frontier | PointStatus::Duplicate))
        .collect();
    c.require(
        ours == oracle,
        format!(
            "{name}: {} evaluated, {} non-dominated, matches brute force: {}",
            evaluated.len(),
            oracle.len(),
            ours == oracle
        ),
    );
    points.iter().filter(|p| p.status == PointStatus::Frontier).cloned().collect()
}

fn criterion_7(section4: &[ParetoPoint]) -> Verdict {
    let mut c = Check::new(7, "Pareto frontier");
    frontier_check(&mut c, "parallel_adaptive.toml", section4, 2);

    let points = commands::pareto_points(&load("stepped_wedge_adaptive.toml")).unwrap();
    let front = frontier_check(&mut c, "stepped_wedge_adaptive.toml", &points, 2);
    let has = front.iter().any(|p| matches!(p.design, StageOneDesign::Staggered { t1: 5, m1: 30, .. }));
    let names: Vec<String> = front.iter().map(|p| commands::describe(&p.design)).collect();
    c.require(
        (8..=12).contains(&front.len()),
        format!("stepped-wedge frontier has {} points (want 8-12): {}", front.len(), names.join("; ")),
    );
    c.require(has, "stepped-wedge frontier contains t1 = 5, m1 = 30");

    let points = commands::pareto_points(&load("binary_redesign.toml")).unwrap();
    let front = frontier_check(&mut c, "binary_redesign.toml", &points, 2);
    let names: Vec<String> = front.iter().map(|p| commands::describe(&p.design)).collect();
    c.require(front.len() == 3, format!("redesign frontier has {} points (want 3): {}", front.len(), names.join("; ")));
    c.finish()
}

fn criterion_8() -> Verdict {
    let mut c = Check::new(8, "binary-outcome redesign boundary and interim stop");
    let cfg = load("binary_redesign.toml");
    let (problem, rule) = plan(&cfg);
    let sides = problem.model.settings.sides;
    c.require(
        within(rule.boundary, 2.38, 0.05),
        format!("efficacy boundary -{:.4} (want -2.38 ± 0.05)", rule.boundary),
    );
    let action = rule.action_at(-5.22, sides, problem.model.delta);
    c.require(action == Action::StopEfficacy, format!("rule at z1 = -5.22: {}", action.label()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_str().unwrap();
    run_cli(&["rules", "--config", config_path("binary_redesign.toml").to_str().unwrap(), "--out", path]);
    let input = InterimInput { z1: Some(-5.22), ..Default::default() };
    let r = commands::interim_result(&cfg, &dir.path().join("plan.json"), &input).unwrap();
    c.require(r.action == Action::StopEfficacy, format!("interim command at z1 = -5.22: {}", r.action.label()));
    c.note(format!("planned power {:.4}, w1 {:.4}", rule.power, problem.weights().w1()));
    c.finish()
}

fn criterion_9() -> Verdict {
    let mut c = Check::new(9, "quadrature and simulated power");
    let nct = ("small_sample = true", "small_sample = true\nsmall_sample_model = \"noncentral\"");
    let plans = [
        ("15x20 cost-penalised, noncentral t", load_edited("parallel_adaptive.toml", &[nct])),
        ("16x25 budget, noncentral t", load_edited("parallel_budget.toml", &[nct])),
        (
            "14x25 cost-penalised, noncentral t",
            load_edited("parallel_adaptive.toml", &[nct, ("k1 = 15\nm1 = 20", "k1 = 14\nm1 = 25")]),
        ),
        (
            "15x20 cost-penalised, z test",
            load_edited("parallel_adaptive.toml", &[("small_sample = true", "small_sample = false")]),
        ),
    ];
    for (i, (label, cfg)) in plans.into_iter().enumerate() {
        let (problem, rule) = plan(&cfg);
        let s = sim_power(&problem, &rule, 90 + i as u64);
        let gap = (s.estimate - rule.power).abs() / s.se;
        c.require(
            gap <= 3.0,
            format!("{label}: quadrature {:.4}, simulated {:.4} (se {:.4}), {gap:.2} se", rule.power, s.estimate, s.se),
        );
    }
    let (problem, rule) = plan(&load("parallel_adaptive.toml"));
    let s = sim_power(&problem, &rule, 99);
    c.note(format!(
        "shifted t (default): quadrature {:.4}, simulated {:.4} (se {:.4}), {:.2} se",
        rule.power,
        s.estimate,
        s.se,
        (s.estimate - rule.power).abs() / s.se
    ));
    c.finish()
}

fn sim_power(problem: &Problem, rule: &DecisionRule, seed: u64) -> twostage_core::sim::Rate {
    let scenario = Scenario {
        truth: problem.model.corr,
        delta: problem.model.delta,
        replicates: NULL_REPLICATES,
        seed,
        interim: InterimMode::Planned,
    };
    run_scenario(problem, rule, &scenario).unwrap().rejection
}

fn run_cli(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("twostage").chain(args.iter().copied())).unwrap();
    twostage_cli::execute(&cli).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn stage_one_file(path: &Path) {
    let design = StageOneDesign::Parallel { k1: 15, m1: 20, t1: 1, baseline: None };
    let layout = design.stage_one_layout().unwrap();
    let corr = CorrelationModel::nested_exchangeable(0.05, 0.8, 1.0).unwrap();
    let y = simulate_layout(&layout, &OutcomeModel::gaussian(), &corr, 0.1, &mut replicate_rng(10, 0)).unwrap();
    let mut s = String::from("cluster,period,n,mean\n");
    for ((k, t), v) in layout.cells().into_iter().zip(y) {
        s.push_str(&format!("{},{},{},{v}\n", k + 1, t + 1, layout.cell_size(k, t)));
    }
    std::fs::write(path, s).unwrap();
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            for (k, v) in read_dir(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn criterion_10() -> Verdict {
    let mut c = Check::new(10, "byte-identical outputs across runs and thread counts");
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("stage1.csv");
    stage_one_file(&data);
    let cfg = |n: &str| config_path(n).to_str().unwrap().to_string();
    let (s4, s6, s7) = (cfg("parallel_adaptive.toml"), cfg("stepped_wedge_adaptive.toml"), cfg("binary_redesign.toml"));
    let runs = [
        ("sequential", Mode::Sequential, 1),
        ("sequential again", Mode::Sequential, 1),
        ("1 thread", Mode::Parallel, 1),
        ("2 threads", Mode::Parallel, 2),
        ("4 threads", Mode::Parallel, 4),
    ];
    let mut outputs: Vec<(String, BTreeMap<String, Vec<u8>>)> = Vec::new();
    for (label, mode, threads) in runs {
        let root: PathBuf = tmp.path().join(label.replace(' ', "_"));
        let d = |sub: &str| root.join(sub).to_str().unwrap().to_string();
        par::set_mode(mode);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            run_cli(&["rules", "--config", &s4, "--out", &d("rules")]);
            let plan = root.join("rules/plan.json");
            run_cli(&[
                "interim",
                "--config",
                &s4,
                "--plan",
                plan.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--out",
                &d("interim"),
            ]);
            run_cli(&[
                "simulate",
                "--config",
                &s4,
                "--out",
                &d("sim4"),
                "--replicates",
                "2000",
                "--trace",
                "--format",
                "json",
            ]);
            run_cli(&["simulate", "--config", &s6, "--out", &d("sim6"), "--replicates", "200", "--trace"]);
            run_cli(&["pareto", "--config", &s7, "--out", &d("pareto")]);
        });
        outputs.push((label.to_string(), read_dir(&root)));
    }
    par::set_mode(Mode::Parallel);
    let (first, reference) = &outputs[0];
    c.note(format!("{} files compared: {}", reference.len(), reference.keys().cloned().collect::<Vec<_>>().join(", ")));
    for (label, files) in &outputs[1..] {
        let differing: Vec<&String> = reference.keys().filter(|k| files.get(*k) != reference.get(*k)).collect();
        let same_set = files.len() == reference.len();
        c.require(
            same_set && differing.is_empty(),
            format!("{label} vs {first}: {} differing files {differing:?}", differing.len()),
        );
    }
    c.finish()
}

fn main() {
    let start = Instant::now();
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        v.print();
        std::io::stdout().flush().unwrap();
        verdicts.push(v);
    };
    report(fixed_design(1, "parallel_fixed.toml", (0.815, 0.005), 1440.0, Some(2640.0)));
    report(fixed_design(2, "stepped_wedge_fixed.toml", (0.80, 0.01), 9240.0, None));
    let (v, section4_points) = criterion_3();
    report(v);
    let (v, budget_runs) = criterion_4();
    report(v);
    report(criterion_5());
    report(criterion_6(budget_runs));
    report(criterion_7(&section4_points));
    report(criterion_8());
    report(criterion_9());
    report(criterion_10());

    println!();
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    for v in &verdicts {
        println!("{} {:>2} {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.title);
    }
    println!(
        "{} of {} criteria pass ({:.0} s)",
        verdicts.len() - failed.len(),
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
