use crate::config::Config;
use crate::data;
use crate::error::{CliError, CliResult};
use crate::output::Output;
use crate::plan::{self, PlanFile};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;
use twostage_core::inference::{critical_value, information_for, AnalysisModel};
use twostage_core::interim::{
    analysis_scale, estimate_theta, interim_decide, InterimPolicy, InterimResult, ThetaEstimate,
};
use twostage_core::model::{build_covariance, CorrelationFamily, CorrelationModel, StageOneDesign};
use twostage_core::optimiser::{calibrate, rule_objectives, rule_table, DecisionRule, Problem};
use twostage_core::pareto::{frontier_search, ParetoPoint, PointStatus};
use twostage_core::power::stage_one_power;
use twostage_core::sim::{run_scenario, InterimMode, Scenario};

pub fn describe(d: &StageOneDesign) -> String {
    match *d {
        StageOneDesign::Parallel { k1, m1, t1, baseline } => {
            let b = baseline.map_or(String::new(), |b| format!(" baseline={b}"));
            format!("parallel k1={k1} m1={m1} t1={t1}{b}")
        }
        StageOneDesign::Staggered { k, plan_periods, t1, m1 } => {
            format!("staggered k={k} plan_periods={plan_periods} t1={t1} m1={m1}")
        }
    }
}

fn calibrated(cfg: &Config) -> CliResult<(Problem, DecisionRule)> {
    let problem = Problem::new(cfg.design()?, &cfg.grid()?, &cfg.planning_model()?)?;
    let rule = calibrate(&problem, &cfg.calibration()?)?;
    Ok((problem, rule))
}

fn plan_or_calibrate(cfg: &Config, plan: Option<&Path>) -> CliResult<(Problem, DecisionRule)> {
    match plan {
        Some(p) => plan::load(p, cfg),
        None => calibrated(cfg),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerReport {
    pub design: String,
    pub mode: &'static str,
    pub power: f64,
    pub stage_one_efficacy: f64,
    pub expected_participants: f64,
    pub max_participants: f64,
    pub expected_cost: f64,
    pub max_cost: f64,
    pub expected_clusters: f64,
    pub max_clusters: f64,
    pub i1: f64,
    pub df1: f64,
    pub boundary: f64,
    pub w1: f64,
}

pub fn power_report(cfg: &Config, plan: Option<&Path>) -> CliResult<PowerReport> {
    let design = cfg.design()?;
    let model = cfg.planning_model()?;
    if plan.is_none() && (cfg.stage2.is_none() || cfg.rule.is_none()) {
        let layout = design.stage_one_layout()?;
        let info = information_for(&layout, &model.corr, &model.outcome)?;
        let power = stage_one_power(model.delta, info.i1, info.df1, &model.settings)?;
        let n = layout.total_participants() as f64;
        let cost = model.cost.stage_one_cost(&layout);
        let k = layout.n_clusters() as f64;
        return Ok(PowerReport {
            design: describe(&design),
            mode: "single-stage",
            power,
            stage_one_efficacy: power,
            expected_participants: n,
            max_participants: n,
            expected_cost: cost,
            max_cost: cost,
            expected_clusters: k,
            max_clusters: k,
            i1: info.i1,
            df1: info.df1,
            boundary: critical_value(model.settings.alpha, model.settings.sides)?,
            w1: 1.0,
        });
    }
    let (problem, rule) = plan_or_calibrate(cfg, plan)?;
    let o = rule_objectives(&problem, &rule)?;
    Ok(PowerReport {
        design: describe(&problem.design),
        mode: "adaptive",
        power: o.power,
        stage_one_efficacy: problem.query.efficacy_probability(),
        expected_participants: o.expected_participants,
        max_participants: o.max_participants,
        expected_cost: o.expected_cost,
        max_cost: o.max_cost,
        expected_clusters: o.expected_clusters,
        max_clusters: o.max_clusters,
        i1: problem.info1.i1,
        df1: problem.info1.df1,
        boundary: rule.boundary,
        w1: problem.weights().w1(),
    })
}

pub fn power(cfg: &Config, out: &Output, plan: Option<&Path>) -> CliResult<String> {
    let r = power_report(cfg, plan)?;
    out.table("power", std::slice::from_ref(&r))?;
    let mut s = String::new();
    writeln!(s, "design                {} ({})", r.design, r.mode).unwrap();
    writeln!(s, "total power           {:.4}", r.power).unwrap();
    writeln!(s, "stage 1 efficacy      {:.4}", r.stage_one_efficacy).unwrap();
    writeln!(s, "participants          expected {:.1}, max {:.0}", r.expected_participants, r.max_participants)
        .unwrap();
    writeln!(s, "cost                  expected {:.1}, max {:.0}", r.expected_cost, r.max_cost).unwrap();
    writeln!(s, "clusters              expected {:.2}, max {:.0}", r.expected_clusters, r.max_clusters).unwrap();
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
struct RuleCsvRow {
    z1: f64,
    action: String,
    #[serde(rename = "K2")]
    k2: Option<u32>,
    m2: Option<u32>,
    t2: Option<u32>,
    r: Option<f64>,
    cp: f64,
    cost: f64,
    density: f64,
}

pub fn rules(cfg: &Config, out: &Output) -> CliResult<String> {
    let (problem, rule) = calibrated(cfg)?;
    let plan = PlanFile::new(out.provenance.clone(), cfg, &problem, &rule)?;
    out.json("plan.json", &plan)?;
    let rows: Vec<RuleCsvRow> = rule_table(&problem, &rule)?
        .into_iter()
        .map(|r| RuleCsvRow {
            z1: r.z1,
            action: r.action,
            k2: r.k2,
            m2: r.m2,
            t2: r.t2,
            r: r.r,
            cp: r.cp,
            cost: r.cost,
            density: r.density,
        })
        .collect();
    out.table("rule", &rows)?;
    let o = plan.objectives;
    let w = problem.weights();
    let mut s = String::new();
    writeln!(s, "design                {}", describe(&problem.design)).unwrap();
    writeln!(s, "weights               w1 {:.4}, w2 {:.4}", w.w1(), w.w2()).unwrap();
    writeln!(s, "efficacy boundary     |z1| >= {:.4}", rule.boundary).unwrap();
    writeln!(s, "criterion             {:?}, calibrated value {:.6}", rule.criterion, rule.calibration).unwrap();
    writeln!(s, "total power           {:.4}", rule.power).unwrap();
    writeln!(s, "participants          expected {:.1}, max {:.0}", o.expected_participants, o.max_participants)
        .unwrap();
    writeln!(s, "cost                  expected {:.1}, max {:.0}", o.expected_cost, o.max_cost).unwrap();
    writeln!(s, "early stop            {:.4}", o.early_stop).unwrap();
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParetoRow {
    pub kind: &'static str,
    pub clusters: u32,
    pub m1: u32,
    pub t1: u32,
    pub baseline: Option<u32>,
    pub plan_periods: Option<u32>,
    pub stage_one_power: f64,
    pub status: PointStatus,
    pub expected_cost: Option<f64>,
    pub max_cost: Option<f64>,
    pub expected_participants: Option<f64>,
    pub max_participants: Option<f64>,
    pub expected_clusters: Option<f64>,
    pub max_clusters: Option<f64>,
    pub early_stop: Option<f64>,
    pub power: Option<f64>,
    pub boundary: Option<f64>,
    pub calibration: Option<f64>,
    pub note: Option<String>,
}

impl From<&ParetoPoint> for ParetoRow {
    fn from(p: &ParetoPoint) -> Self {
        let (kind, clusters, m1, t1, baseline, plan_periods) = match p.design {
            StageOneDesign::Parallel { k1, m1, t1, baseline } => ("parallel", k1, m1, t1, baseline, None),
            StageOneDesign::Staggered { k, plan_periods, t1, m1 } => ("staggered", k, m1, t1, None, Some(plan_periods)),
        };
        let o = p.objectives;
        Self {
            kind,
            clusters,
            m1,
            t1,
            baseline,
            plan_periods,
            stage_one_power: p.stage_one_power,
            status: p.status,
            expected_cost: o.map(|o| o.expected_cost),
            max_cost: o.map(|o| o.max_cost),
            expected_participants: o.map(|o| o.expected_participants),
            max_participants: o.map(|o| o.max_participants),
            expected_clusters: o.map(|o| o.expected_clusters),
            max_clusters: o.map(|o| o.max_clusters),
            early_stop: o.map(|o| o.early_stop),
            power: o.map(|o| o.power),
            boundary: p.rule.as_ref().map(|r| r.boundary),
            calibration: p.rule.as_ref().map(|r| r.calibration),
            note: p.note.clone(),
        }
    }
}

pub fn pareto_points(cfg: &Config) -> CliResult<Vec<ParetoPoint>> {
    Ok(frontier_search(&cfg.space()?, &cfg.grid()?, &cfg.planning_model()?, &cfg.frontier_spec()?)?)
}

pub fn pareto(cfg: &Config, out: &Output) -> CliResult<String> {
    let points = pareto_points(cfg)?;
    let rows: Vec<ParetoRow> = points.iter().map(ParetoRow::from).collect();
    let frontier: Vec<ParetoRow> = rows.iter().filter(|r| r.status == PointStatus::Frontier).cloned().collect();
    out.table("pareto_evaluated", &rows)?;
    out.table("pareto_frontier", &frontier)?;
    let count = |s: PointStatus| points.iter().filter(|p| p.status == s).count();
    let mut s = String::new();
    writeln!(
        s,
        "{} designs: {} frontier, {} dominated, {} duplicate, {} screened, {} infeasible",
        points.len(),
        count(PointStatus::Frontier),
        count(PointStatus::Dominated),
        count(PointStatus::Duplicate),
        count(PointStatus::Screened),
        count(PointStatus::Infeasible)
    )
    .unwrap();
    for p in points.iter().filter(|p| p.status == PointStatus::Frontier) {
        let o = p.objectives.expect("frontier points are evaluated");
        writeln!(
            s,
            "  {:<48} expected cost {:>9.1}  max cost {:>8.0}  power {:.4}",
            describe(&p.design),
            o.expected_cost,
            o.max_cost,
            o.power
        )
        .unwrap();
    }
    Ok(s)
}

/// Inputs for an interim decision.
#[derive(Debug, Clone, Default)]
pub struct InterimInput<'a> {
    pub data: Option<&'a Path>,
    pub z1: Option<f64>,
    pub icc: Option<f64>,
    pub cac: Option<f64>,
    pub decay: Option<f64>,
    pub conservative: bool,
}

pub fn interim_result(cfg: &Config, plan: &Path, input: &InterimInput) -> CliResult<InterimResult> {
    let (problem, rule) = plan::load(plan, cfg)?;
    let model = &problem.model;
    let policy = if input.conservative { InterimPolicy::Conservative } else { cfg.interim.policy.to_core() };
    let overrides = input.icc.is_some() || input.cac.is_some() || input.decay.is_some();
    let (z1, estimate) = match (input.data, input.z1) {
        (Some(_), Some(_)) => return Err(CliError::Config("give either a data file or --z1, not both".into())),
        (Some(_), None) if overrides => {
            return Err(CliError::Config("correlation overrides apply only with --z1".into()));
        }
        (Some(path), None) => {
            let d = data::read(path, &problem.stage_one, model.outcome.family)?;
            let cov = build_covariance(&d.layout, &model.corr, &model.outcome)?;
            let analysis = AnalysisModel::new(&d.layout, &cov)?;
            let opts = cfg.estimation();
            let y = analysis_scale(&d.layout, &d.values, &model.outcome, opts.continuity);
            let z1 = analysis.stage_one(&y, model.settings.small_sample)?.z;
            let opts = twostage_core::interim::EstimationOptions {
                within_variance: d.within_variance.or(opts.within_variance),
                ..opts
            };
            (z1, estimate_theta(&d.layout, &d.values, &model.outcome, &model.corr, &opts))
        }
        (None, Some(z1)) => {
            if !z1.is_finite() {
                return Err(CliError::Config("--z1 must be finite".into()));
            }
            let mut section = cfg.correlation;
            if let Some(v) = input.icc {
                section.icc = v;
            }
            if input.cac.is_some() {
                section.cac = input.cac;
            }
            if input.decay.is_some() {
                section.decay = input.decay;
            }
            let corr: CorrelationModel = section.to_core()?;
            let est = ThetaEstimate {
                corr,
                icc_interval: None,
                secondary_interval: None,
                boundary: corr.icc == 0.0,
                secondary_estimated: input.cac.is_some() || input.decay.is_some(),
                restricted_loglik: 0.0,
            };
            (z1, Ok(est))
        }
        (None, None) => return Err(CliError::Config("interim needs a stage 1 data file or --z1".into())),
    };
    Ok(interim_decide(&problem, &rule, z1, estimate, policy)?)
}

#[derive(Debug, Clone, Serialize)]
struct InterimRow {
    z1: f64,
    boundary: f64,
    w1: f64,
    w2: f64,
    action: &'static str,
    #[serde(rename = "K2")]
    k2: Option<u32>,
    m2: Option<u32>,
    t2: Option<u32>,
    r: Option<f64>,
    cp: Option<f64>,
    icc_hat: Option<f64>,
    icc_lower: Option<f64>,
    icc_upper: Option<f64>,
    secondary_hat: Option<f64>,
    secondary_lower: Option<f64>,
    secondary_upper: Option<f64>,
    icc_used: f64,
    secondary_used: Option<f64>,
    fallback: bool,
}

fn secondary_name(corr: &CorrelationModel) -> &'static str {
    match corr.family {
        CorrelationFamily::ExponentialDecay => "decay",
        _ => "cac",
    }
}

fn interim_text(r: &InterimResult) -> String {
    let mut s = String::new();
    let interval = |i: Option<(f64, f64)>| i.map_or(String::new(), |(a, b)| format!(" [{a:.4}, {b:.4}]"));
    writeln!(s, "z1                    {:.4}", r.z1).unwrap();
    writeln!(s, "efficacy boundary     |z1| >= {:.4} (w1 {:.4}, w2 {:.4})", r.boundary, r.weights.w1(), r.weights.w2())
        .unwrap();
    match &r.theta_hat {
        Some(e) => {
            writeln!(s, "icc estimate          {:.4}{}", e.corr.icc, interval(e.icc_interval)).unwrap();
            if let (Some(v), true) = (e.corr.secondary(), e.secondary_estimated) {
                let label = format!("{} estimate", secondary_name(&e.corr));
                writeln!(s, "{label:<22}{v:.4}{}", interval(e.secondary_interval)).unwrap();
            }
        }
        None => writeln!(s, "icc estimate          not available").unwrap(),
    }
    let used = &r.theta_used;
    let secondary = used.secondary().map_or(String::new(), |v| format!(", {} {v:.4}", secondary_name(used)));
    let note = if r.fallback { " (planning values, estimation failed)" } else { "" };
    writeln!(s, "model used            icc {:.4}{secondary}{note}", used.icc).unwrap();
    writeln!(s, "action                {}", r.action.label()).unwrap();
    if let Some(c) = &r.candidate {
        let g = c.params;
        writeln!(s, "stage 2 design        K2 {} m2 {} t2 {} r {}", g.k2, g.m2, g.t2, g.r).unwrap();
        writeln!(s, "stage 2 cost          {:.0}", c.cost).unwrap();
    }
    if let Some(cp) = r.cp {
        writeln!(s, "conditional power     {cp:.4}").unwrap();
    }
    s
}

pub fn interim(cfg: &Config, out: &Output, plan: &Path, input: &InterimInput) -> CliResult<String> {
    let r = interim_result(cfg, plan, input)?;
    let text = interim_text(&r);
    out.document("interim.json", &r)?;
    if out.format == crate::output::Format::Csv {
        let g = r.candidate.as_ref().map(|c| c.params);
        let hat = r.theta_hat.as_ref();
        let row = InterimRow {
            z1: r.z1,
            boundary: r.boundary,
            w1: r.weights.w1(),
            w2: r.weights.w2(),
            action: r.action.label(),
            k2: g.map(|g| g.k2),
            m2: g.map(|g| g.m2),
            t2: g.map(|g| g.t2),
            r: g.map(|g| g.r),
            cp: r.cp,
            icc_hat: hat.map(|e| e.corr.icc),
            icc_lower: hat.and_then(|e| e.icc_interval).map(|i| i.0),
            icc_upper: hat.and_then(|e| e.icc_interval).map(|i| i.1),
            secondary_hat: hat.filter(|e| e.secondary_estimated).and_then(|e| e.corr.secondary()),
            secondary_lower: hat.and_then(|e| e.secondary_interval).map(|i| i.0),
            secondary_upper: hat.and_then(|e| e.secondary_interval).map(|i| i.1),
            icc_used: r.theta_used.icc,
            secondary_used: r.theta_used.secondary(),
            fallback: r.fallback,
        };
        out.table("interim", &[row])?;
    }
    out.text("interim.txt", &text)?;
    Ok(text)
}

#[derive(Debug, Clone, Default)]
pub struct SimulateInput<'a> {
    pub plan: Option<&'a Path>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub trace: bool,
}

pub fn scenario(cfg: &Config, input: &SimulateInput) -> CliResult<Scenario> {
    let s = cfg.simulate.clone().unwrap_or_default();
    let truth = match &s.truth {
        Some(t) => t.to_core()?,
        None => cfg.correlation.to_core()?,
    };
    let replicates = input.replicates.unwrap_or(s.replicates);
    if replicates == 0 {
        return Err(CliError::Config("replicates must be positive".into()));
    }
    Ok(Scenario {
        truth,
        delta: s.delta.map_or_else(|| cfg.delta(), Ok)?,
        replicates,
        seed: input.seed.unwrap_or(s.seed),
        interim: if s.reestimate { InterimMode::Reestimate(s.policy.to_core()) } else { InterimMode::Planned },
    })
}

#[derive(Debug, Clone, Serialize)]
struct MetricRow {
    metric: &'static str,
    estimate: f64,
    se: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct TraceRow<'a> {
    replicate: usize,
    z1: f64,
    action: &'a str,
    #[serde(rename = "K2")]
    k2: Option<u32>,
    m2: Option<u32>,
    t2: Option<u32>,
    r: Option<f64>,
    participants: u64,
    clusters: usize,
    cost: f64,
    z: Option<f64>,
    reject: bool,
    icc_hat: Option<f64>,
    fallback: bool,
}

pub fn simulate(cfg: &Config, out: &Output, input: &SimulateInput) -> CliResult<String> {
    let (problem, rule) = plan_or_calibrate(cfg, input.plan)?;
    let sc = scenario(cfg, input)?;
    let summary = run_scenario(&problem, &rule, &sc)?;
    let trace = input.trace || cfg.simulate.as_ref().is_some_and(|s| s.trace);
    if trace {
        let rows: Vec<TraceRow> = summary
            .records
            .iter()
            .map(|r| TraceRow {
                replicate: r.replicate,
                z1: r.z1,
                action: &r.action,
                k2: r.k2,
                m2: r.m2,
                t2: r.t2,
                r: r.r,
                participants: r.participants,
                clusters: r.clusters,
                cost: r.cost,
                z: r.z,
                reject: r.reject,
                icc_hat: r.icc_hat,
                fallback: r.fallback,
            })
            .collect();
        out.table("trace", &rows)?;
    }
    let rate = |metric, r: twostage_core::sim::Rate| MetricRow { metric, estimate: r.estimate, se: Some(r.se) };
    let plain = |metric, v: f64| MetricRow { metric, estimate: v, se: None };
    let rows = vec![
        plain("replicates", summary.replicates as f64),
        plain("failures", summary.failures as f64),
        rate("rejection", summary.rejection),
        rate("early_efficacy", summary.early_efficacy),
        rate("early_futility", summary.early_futility),
        rate("participants", summary.participants),
        plain("max_participants", summary.max_participants as f64),
        rate("clusters", summary.clusters),
        plain("max_clusters", summary.max_clusters as f64),
        rate("cost", summary.cost),
        plain("max_cost", summary.max_cost),
        plain("cost_cap", problem.cost1 + rule.calibration),
        plain("estimation_fallbacks", summary.estimation_fallbacks as f64),
        plain("planned_power", rule.power),
    ];
    match out.format {
        crate::output::Format::Csv => {
            out.table("simulation", &rows)?;
        }
        crate::output::Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                scenario: &'a Scenario,
                design: String,
                metrics: &'a [MetricRow],
            }
            out.document(
                "simulation.json",
                &Body { scenario: &sc, design: describe(&problem.design), metrics: &rows },
            )?;
        }
    }
    let mut s = String::new();
    writeln!(s, "design                {}", describe(&problem.design)).unwrap();
    writeln!(s, "replicates            {} ({} failed), seed {}", summary.replicates, summary.failures, sc.seed)
        .unwrap();
    writeln!(
        s,
        "rejection rate        {:.4} (se {:.4}); planned power {:.4}",
        summary.rejection.estimate, summary.rejection.se, rule.power
    )
    .unwrap();
    writeln!(s, "early efficacy        {:.4}", summary.early_efficacy.estimate).unwrap();
    writeln!(s, "early futility        {:.4}", summary.early_futility.estimate).unwrap();
    writeln!(s, "participants          mean {:.1}, max {}", summary.participants.estimate, summary.max_participants)
        .unwrap();
    writeln!(s, "cost                  mean {:.1}, max {:.0}", summary.cost.estimate, summary.max_cost).unwrap();
    if matches!(rule.criterion, twostage_core::optimiser::Criterion::BudgetConstrained) {
        writeln!(s, "cost cap              {:.0}", problem.cost1 + rule.calibration).unwrap();
    }
    Ok(s)
}
