//! Stage 2 design search and calibration of decision rules.

use crate::error::{Error, Result};
use crate::inference::{information_for, CombinationWeights, DesignInformation, Sides};
use crate::model::{CorrelationModel, OutcomeModel, Stage2Params, StageOneDesign, TrialLayout};
use crate::par;
use crate::power::{total_power, PowerQuery, StepCell, TestSettings, TOTAL_POWER_TOL};
use crate::roots::bisect_decreasing;
use serde::{Deserialize, Serialize};

/// Proportionate cost: participants plus `rho` per recruited cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub rho: f64,
}

impl CostModel {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho must be non-negative, got {rho}")));
        }
        Ok(Self { rho })
    }

    pub fn stage_one_cost(&self, layout: &TrialLayout) -> f64 {
        layout.stage_participants(1) as f64 + self.rho * layout.stage_clusters(1) as f64
    }

    pub fn stage_two_cost(&self, combined: &TrialLayout) -> f64 {
        combined.stage_participants(2) as f64 + self.rho * combined.new_stage_two_clusters() as f64
    }
}

/// Axes of the stage 2 design grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Grid {
    #[serde(default = "zero_vec")]
    pub k2: Vec<u32>,
    pub m2: Vec<u32>,
    #[serde(default = "one_vec")]
    pub t2: Vec<u32>,
    #[serde(default = "unit_vec")]
    pub r: Vec<f64>,
}

fn zero_vec() -> Vec<u32> {
    vec![0]
}
fn one_vec() -> Vec<u32> {
    vec![1]
}
fn unit_vec() -> Vec<f64> {
    vec![1.0]
}

impl Stage2Grid {
    /// Grid with `k2` in `0..=k2_max` and `m2` in `step, 2 step, ..., m2_max`.
    pub fn parallel(k2_max: u32, m2_max: u32, m2_step: u32) -> Self {
        Self {
            k2: (0..=k2_max).collect(),
            m2: (1..=m2_max / m2_step.max(1)).map(|i| i * m2_step.max(1)).collect(),
            t2: vec![1],
            r: vec![1.0],
        }
    }

    /// Candidates in grid order (`k2`, then `m2`, `t2`, `r`).
    pub fn enumerate(&self) -> Result<Vec<Stage2Params>> {
        let mut out = Vec::new();
        for &k2 in &self.k2 {
            for &m2 in &self.m2 {
                for &t2 in &self.t2 {
                    for &r in &self.r {
                        out.push(Stage2Params { k2, m2, t2, r });
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyGrid);
        }
        Ok(out)
    }
}

/// A stage 2 design with its cost and information under one correlation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub params: Stage2Params,
    pub grid_index: usize,
    pub cost: f64,
    pub participants: u64,
    pub new_clusters: u32,
    pub i2c: f64,
    pub df2c: f64,
}

/// Which stage 2 design enters the planning information for the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PlanningReference {
    /// Carry on as in stage 1: no new clusters, stage 1 cell size, and the
    /// originally planned remaining periods (one post period for parallel designs).
    #[default]
    Continue,
    /// The grid design with the largest conditional information.
    MaxGrid,
    Explicit(Stage2Params),
}

/// Planning assumptions shared by every stage 1 candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningModel {
    pub corr: CorrelationModel,
    pub outcome: OutcomeModel,
    pub delta: f64,
    pub settings: TestSettings,
    pub cost: CostModel,
    pub reference: PlanningReference,
}

/// A stage 1 design prepared for rule search: stage 1 summaries, weights and
/// the costed candidate list in tie-break order.
#[derive(Debug, Clone)]
pub struct Problem {
    pub design: StageOneDesign,
    pub stage_one: TrialLayout,
    pub info1: DesignInformation,
    pub cost1: f64,
    pub n1: u64,
    pub k1: usize,
    pub reference: Stage2Params,
    pub candidates: Vec<Candidate>,
    pub query: PowerQuery,
    pub model: PlanningModel,
}

fn tie_break_key(c: &Candidate) -> (f64, u32, u32, usize) {
    (c.cost, c.new_clusters, c.params.m2, c.grid_index)
}

/// Cost and information of every grid design under `corr`, sorted by the tie-break order.
pub fn prepare_candidates(
    design: &StageOneDesign,
    params: &[Stage2Params],
    corr: &CorrelationModel,
    outcome: &OutcomeModel,
    cost: &CostModel,
) -> Result<Vec<Candidate>> {
    let built = par::map_range(params.len(), |i| -> Result<Candidate> {
        let p = params[i];
        let layout = design.combined_layout(&p)?;
        let info = information_for(&layout, corr, outcome)?;
        Ok(Candidate {
            params: p,
            grid_index: i,
            cost: cost.stage_two_cost(&layout),
            participants: layout.stage_participants(2),
            new_clusters: layout.new_stage_two_clusters() as u32,
            i2c: info.i2c,
            df2c: info.df2c,
        })
    });
    let mut out = built.into_iter().collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| tie_break_key(a).partial_cmp(&tie_break_key(b)).expect("finite costs"));
    Ok(out)
}

impl Problem {
    pub fn new(design: StageOneDesign, grid: &Stage2Grid, model: &PlanningModel) -> Result<Self> {
        let stage_one = design.stage_one_layout()?;
        let info1 = information_for(&stage_one, &model.corr, &model.outcome)?;
        if info1.i1 <= 0.0 {
            return Err(Error::ZeroStageOneInformation);
        }
        let params = grid.enumerate()?;
        let candidates = prepare_candidates(&design, &params, &model.corr, &model.outcome, &model.cost)?;
        let reference = match model.reference {
            PlanningReference::Explicit(p) => p,
            PlanningReference::MaxGrid => {
                candidates
                    .iter()
                    .max_by(|a, b| a.i2c.partial_cmp(&b.i2c).expect("finite information"))
                    .expect("non-empty grid")
                    .params
            }
            PlanningReference::Continue => match design {
                StageOneDesign::Parallel { m1, t1, .. } => Stage2Params { k2: 0, m2: m1, t2: t1, r: 1.0 },
                StageOneDesign::Staggered { plan_periods, t1, m1, .. } => {
                    Stage2Params { k2: 0, m2: m1, t2: plan_periods.saturating_sub(t1), r: 1.0 }
                }
            },
        };
        let ref_info = information_for(&design.combined_layout(&reference)?, &model.corr, &model.outcome)?;
        let crit = crate::inference::critical_value(model.settings.alpha, model.settings.sides)?;
        let weights = CombinationWeights::from_information(ref_info.i1, ref_info.i2c, crit)?;
        let query = PowerQuery::new(model.delta, model.settings, weights, info1.i1, info1.df1)?;
        Ok(Self {
            design,
            cost1: model.cost.stage_one_cost(&stage_one),
            n1: stage_one.total_participants(),
            k1: stage_one.n_clusters(),
            stage_one,
            info1,
            reference,
            candidates,
            query,
            model: model.clone(),
        })
    }

    pub fn weights(&self) -> &CombinationWeights {
        self.query.weights()
    }

    /// Candidates re-evaluated under another correlation model. The tie-break
    /// key does not depend on the model, so the order matches `self.candidates`.
    pub fn candidates_under(&self, corr: &CorrelationModel) -> Result<Vec<Candidate>> {
        let mut params: Vec<(usize, Stage2Params)> = self.candidates.iter().map(|c| (c.grid_index, c.params)).collect();
        params.sort_by_key(|p| p.0);
        let params: Vec<Stage2Params> = params.into_iter().map(|p| p.1).collect();
        prepare_candidates(&self.design, &params, corr, &self.model.outcome, &self.model.cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    CostPenalised,
    BudgetConstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "action", content = "candidate")]
pub enum Action {
    StopEfficacy,
    StopFutility,
    /// Index into the problem's candidate list.
    Continue(usize),
}

impl Action {
    pub fn label(&self) -> &'static str {
        match self {
            Action::StopEfficacy => "stop-efficacy",
            Action::StopFutility => "stop-futility",
            Action::Continue(_) => "continue",
        }
    }
}

/// Default conditional power floor for futility under the budget criterion.
pub const DEFAULT_FUTILITY_FLOOR: f64 = 0.10;

fn argmax(values: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Cost-penalised choice from conditional powers aligned with `candidates`.
pub fn select_cost_penalised(cps: &[f64], candidates: &[Candidate], lambda: f64) -> Action {
    match argmax(cps.iter().zip(candidates).enumerate().map(|(i, (cp, c))| (i, cp - lambda * c.cost))) {
        Some((i, v)) if v >= 0.0 => Action::Continue(i),
        _ => Action::StopFutility,
    }
}

/// Budget-constrained choice from conditional powers aligned with `candidates`.
pub fn select_budget_constrained(cps: &[f64], candidates: &[Candidate], cap: f64, floor: f64) -> Action {
    let feasible = cps.iter().zip(candidates).enumerate().filter(|(_, (_, c))| c.cost <= cap);
    match argmax(feasible.map(|(i, (cp, _))| (i, *cp))) {
        Some((i, v)) if v >= floor => Action::Continue(i),
        _ => Action::StopFutility,
    }
}

fn interim_stop(query: &PowerQuery, z1: f64) -> Option<Action> {
    let c = query.boundary();
    let s = if query.delta() < 0.0 { -1.0 } else { 1.0 };
    match query.settings().sides {
        Sides::Two if z1.abs() > c => Some(Action::StopEfficacy),
        Sides::One if s * z1 > c => Some(Action::StopEfficacy),
        Sides::One if s * z1 < -c => Some(Action::StopFutility),
        _ => None,
    }
}

/// Conditional power of every candidate at `z1`. Stage 2 bounds are computed
/// once per distinct degrees of freedom.
pub fn conditional_powers(z1: f64, candidates: &[Candidate], query: &PowerQuery) -> Result<Vec<f64>> {
    if query.weights().w2() == 0.0 || !z1.is_finite() {
        return candidates.iter().map(|c| query.conditional_power(z1, c.i2c, c.df2c)).collect();
    }
    let mut bounds: Vec<(f64, crate::power::StageTwoBounds)> = Vec::new();
    candidates
        .iter()
        .map(|c| {
            if !(c.i2c >= 0.0 && c.i2c.is_finite()) || (query.settings().small_sample && !(c.df2c >= 1.0)) {
                return query.conditional_power(z1, c.i2c, c.df2c);
            }
            let b = match bounds.iter().find(|(d, _)| *d == c.df2c) {
                Some((_, b)) => *b,
                None => {
                    let b = query.stage_two_bounds(z1, c.df2c);
                    bounds.push((c.df2c, b));
                    b
                }
            };
            Ok(query.conditional_power_with(&b, c.i2c, c.df2c))
        })
        .collect()
}

pub fn optimise_cost_penalised(z1: f64, candidates: &[Candidate], lambda: f64, query: &PowerQuery) -> Result<Action> {
    if candidates.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {lambda}")));
    }
    if let Some(a) = interim_stop(query, z1) {
        return Ok(a);
    }
    Ok(select_cost_penalised(&conditional_powers(z1, candidates, query)?, candidates, lambda))
}

pub fn optimise_budget_constrained(
    z1: f64,
    candidates: &[Candidate],
    cap: f64,
    floor: f64,
    query: &PowerQuery,
) -> Result<Action> {
    if candidates.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !(cap >= 0.0) {
        return Err(Error::InvalidParameter(format!("cost cap must be non-negative, got {cap}")));
    }
    if let Some(a) = interim_stop(query, z1) {
        return Ok(a);
    }
    Ok(select_budget_constrained(&conditional_powers(z1, candidates, query)?, candidates, cap, floor))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOptions {
    pub target: f64,
    pub criterion: Criterion,
    #[serde(default = "default_points")]
    pub z_points: usize,
    #[serde(default = "default_floor")]
    pub futility_floor: f64,
    #[serde(default = "default_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
}

fn default_points() -> usize {
    201
}
fn default_floor() -> f64 {
    DEFAULT_FUTILITY_FLOOR
}
fn default_iter() -> usize {
    60
}
fn default_tol() -> f64 {
    0.002
}

impl CalibrationOptions {
    pub fn new(target: f64, criterion: Criterion) -> Self {
        Self {
            target,
            criterion,
            z_points: default_points(),
            futility_floor: default_floor(),
            max_iter: default_iter(),
            tolerance: default_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub monotonicity_violations: usize,
    pub max_power: f64,
}

/// Piecewise-constant decision rule over `z1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub boundary: f64,
    /// `z_points` equally spaced breakpoints on `[-c, c]`.
    pub breakpoints: Vec<f64>,
    /// One action per cell `[b_i, b_{i+1})`, chosen at the lower breakpoint.
    pub actions: Vec<Action>,
    pub criterion: Criterion,
    /// λ for the cost-penalised criterion, the cost cap for the budget criterion.
    pub calibration: f64,
    pub futility_floor: f64,
    pub power: f64,
    pub diagnostics: CalibrationDiagnostics,
}

impl DecisionRule {
    /// Index of the cell containing `z1`, if inside `[-c, c]`.
    pub fn cell_of(&self, z1: f64) -> Option<usize> {
        let c = self.boundary;
        if !(z1.abs() <= c) || self.actions.is_empty() {
            return None;
        }
        let n = self.actions.len();
        let i = ((z1 + c) / (2.0 * c) * n as f64).floor();
        Some((i.max(0.0) as usize).min(n - 1))
    }

    pub fn action_at(&self, z1: f64, sides: Sides, delta: f64) -> Action {
        let s = if delta < 0.0 { -1.0 } else { 1.0 };
        match sides {
            Sides::Two if z1.abs() > self.boundary => return Action::StopEfficacy,
            Sides::One if s * z1 > self.boundary => return Action::StopEfficacy,
            Sides::One if s * z1 < -self.boundary => return Action::StopFutility,
            _ => {}
        }
        self.cell_of(z1).map(|i| self.actions[i]).unwrap_or(Action::StopFutility)
    }

    /// Continuation cells for power integration.
    pub fn step_cells(&self, candidates: &[Candidate]) -> Vec<StepCell> {
        self.actions
            .iter()
            .enumerate()
            .map(|(i, a)| StepCell {
                lo: self.breakpoints[i],
                hi: self.breakpoints[i + 1],
                stage_two: match a {
                    Action::Continue(j) => Some((candidates[*j].i2c, candidates[*j].df2c)),
                    _ => None,
                },
            })
            .collect()
    }

    /// Rule that stops at the interim whatever happens.
    pub fn always_stop(query: &PowerQuery, z_points: usize) -> Self {
        let c = query.boundary();
        let breakpoints = breakpoints(c, z_points);
        Self {
            boundary: c,
            actions: vec![Action::StopFutility; breakpoints.len() - 1],
            breakpoints,
            criterion: Criterion::CostPenalised,
            calibration: f64::INFINITY,
            futility_floor: DEFAULT_FUTILITY_FLOOR,
            power: query.efficacy_probability(),
            diagnostics: CalibrationDiagnostics {
                iterations: 0,
                converged: true,
                monotonicity_violations: 0,
                max_power: f64::NAN,
            },
        }
    }
}

fn breakpoints(c: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| -c + 2.0 * c * i as f64 / (n - 1) as f64).collect()
}

/// Rule evaluation with conditional powers at the breakpoints tabulated once
/// and per-cell integrals cached across calibration iterations.
struct RuleEngine<'a> {
    problem: &'a Problem,
    breakpoints: Vec<f64>,
    /// `cp[i * n_cand + j]` at the lower breakpoint of cell `i`.
    cp: Vec<f64>,
    integrals: Vec<f64>,
    floor: f64,
}

impl<'a> RuleEngine<'a> {
    fn new(problem: &'a Problem, z_points: usize, floor: f64) -> Result<Self> {
        let q = &problem.query;
        let bp = breakpoints(q.boundary(), z_points);
        let cands = &problem.candidates;
        let n = cands.len();
        let cells = bp.len() - 1;
        let rows = par::map_range(cells, |i| conditional_powers(bp[i], cands, q));
        let mut cp = Vec::with_capacity(cells * n);
        for r in rows {
            cp.extend(r?);
        }
        Ok(Self { problem, breakpoints: bp, cp, integrals: vec![f64::NAN; cells * n], floor })
    }

    fn n_cells(&self) -> usize {
        self.breakpoints.len() - 1
    }

    fn actions(&self, criterion: Criterion, value: f64) -> Vec<Action> {
        let n = self.problem.candidates.len();
        (0..self.n_cells())
            .map(|i| {
                if let Some(a) = interim_stop(&self.problem.query, self.breakpoints[i]) {
                    return a;
                }
                let cps = &self.cp[i * n..(i + 1) * n];
                match criterion {
                    Criterion::CostPenalised => select_cost_penalised(cps, &self.problem.candidates, value),
                    Criterion::BudgetConstrained => {
                        select_budget_constrained(cps, &self.problem.candidates, value, self.floor)
                    }
                }
            })
            .collect()
    }

    fn power(&mut self, actions: &[Action]) -> Result<f64> {
        let n = self.problem.candidates.len();
        let missing: Vec<(usize, usize)> = actions
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a {
                Action::Continue(j) if self.integrals[i * n + j].is_nan() => Some((i, *j)),
                _ => None,
            })
            .collect();
        let q = &self.problem.query;
        let tol = TOTAL_POWER_TOL / self.n_cells() as f64;
        let bp = &self.breakpoints;
        let cands = &self.problem.candidates;
        let values = par::map(&missing, |&(i, j)| q.cell_integral(bp[i], bp[i + 1], cands[j].i2c, cands[j].df2c, tol));
        for ((i, j), v) in missing.into_iter().zip(values) {
            self.integrals[i * n + j] = v?;
        }
        let mut total = q.efficacy_probability();
        for (i, a) in actions.iter().enumerate() {
            if let Action::Continue(j) = a {
                total += self.integrals[i * n + j];
            }
        }
        Ok(total)
    }
}

/// Calibrate λ (or the cost cap) by bisection so that total power meets the target.
pub fn calibrate(problem: &Problem, opts: &CalibrationOptions) -> Result<DecisionRule> {
    if problem.candidates.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !(opts.target > 0.0 && opts.target < 1.0) {
        return Err(Error::InvalidParameter(format!("target power must lie in (0, 1), got {}", opts.target)));
    }
    let mut eng = RuleEngine::new(problem, opts.z_points, opts.futility_floor)?;
    let costs = problem.candidates.iter().map(|c| c.cost);
    // generous side first, frugal side second
    let (generous, frugal) = match opts.criterion {
        Criterion::CostPenalised => {
            let min_pos = costs.filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
            (0.0, if min_pos.is_finite() { 1.0 / min_pos } else { 1.0 })
        }
        Criterion::BudgetConstrained => (costs.fold(0.0, f64::max), 0.0),
    };
    let a_gen = eng.actions(opts.criterion, generous);
    let p_gen = eng.power(&a_gen)?;
    if p_gen < opts.target {
        return Err(Error::TargetUnachievable { target: opts.target, max_power: p_gen });
    }
    let a_fru = eng.actions(opts.criterion, frugal);
    let p_fru = eng.power(&a_fru)?;
    let finish =
        |value: f64, actions: Vec<Action>, power: f64, diag: CalibrationDiagnostics, eng: &RuleEngine| DecisionRule {
            boundary: problem.query.boundary(),
            breakpoints: eng.breakpoints.clone(),
            actions,
            criterion: opts.criterion,
            calibration: value,
            futility_floor: opts.futility_floor,
            power,
            diagnostics: diag,
        };
    if p_fru >= opts.target {
        let diag =
            CalibrationDiagnostics { iterations: 0, converged: true, monotonicity_violations: 0, max_power: p_gen };
        return Ok(finish(frugal, a_fru, p_fru, diag, &eng));
    }
    if (p_gen - opts.target).abs() < opts.tolerance {
        let diag =
            CalibrationDiagnostics { iterations: 0, converged: true, monotonicity_violations: 0, max_power: p_gen };
        return Ok(finish(generous, a_gen, p_gen, diag, &eng));
    }
    let mut failure = None;
    let b = bisect_decreasing(
        |v| {
            let a = eng.actions(opts.criterion, v);
            match eng.power(&a) {
                Ok(p) => p,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        generous,
        frugal,
        p_gen,
        p_fru,
        opts.target,
        opts.tolerance,
        opts.max_iter,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let actions = eng.actions(opts.criterion, b.x);
    let power = eng.power(&actions)?;
    let diag = CalibrationDiagnostics {
        iterations: b.iterations,
        converged: b.converged,
        monotonicity_violations: b.monotonicity_violations,
        max_power: p_gen,
    };
    Ok(finish(b.x, actions, power, diag, &eng))
}

/// Operating characteristics of a rule, integrated over the stage 1 statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub expected_cost: f64,
    pub max_cost: f64,
    pub expected_participants: f64,
    pub max_participants: f64,
    pub expected_clusters: f64,
    pub max_clusters: f64,
    pub early_stop: f64,
    pub power: f64,
}

/// Objectives of `rule` when the truth is described by `query` and `candidates`
/// (normally the planning ones).
pub fn rule_objectives_under(
    problem: &Problem,
    rule: &DecisionRule,
    query: &PowerQuery,
    candidates: &[Candidate],
) -> Result<Objectives> {
    let (c1, n1, k1) = (problem.cost1, problem.n1 as f64, problem.k1 as f64);
    let mut o = Objectives {
        expected_cost: c1,
        max_cost: c1,
        expected_participants: n1,
        max_participants: n1,
        expected_clusters: k1,
        max_clusters: k1,
        early_stop: 0.0,
        power: total_power(query, &rule.step_cells(candidates))?,
    };
    let mut continue_mass = 0.0;
    for (i, a) in rule.actions.iter().enumerate() {
        if let Action::Continue(j) = a {
            let p = query.stage_one_mass(rule.breakpoints[i], rule.breakpoints[i + 1]);
            let c = &candidates[*j];
            continue_mass += p;
            o.expected_cost += p * c.cost;
            o.expected_participants += p * c.participants as f64;
            o.expected_clusters += p * c.new_clusters as f64;
            o.max_cost = o.max_cost.max(c1 + c.cost);
            o.max_participants = o.max_participants.max(n1 + c.participants as f64);
            o.max_clusters = o.max_clusters.max(k1 + c.new_clusters as f64);
        }
    }
    o.early_stop = (1.0 - continue_mass).clamp(0.0, 1.0);
    Ok(o)
}

pub fn rule_objectives(problem: &Problem, rule: &DecisionRule) -> Result<Objectives> {
    rule_objectives_under(problem, rule, &problem.query, &problem.candidates)
}

/// One row of the exported rule table, at a breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRow {
    pub z1: f64,
    pub action: String,
    #[serde(rename = "K2")]
    pub k2: Option<u32>,
    pub m2: Option<u32>,
    pub t2: Option<u32>,
    pub r: Option<f64>,
    pub cp: f64,
    pub cost: f64,
    pub density: f64,
}

/// Tabulate the rule at its breakpoints; the last breakpoint repeats the last cell's action.
pub fn rule_table(problem: &Problem, rule: &DecisionRule) -> Result<Vec<RuleRow>> {
    let q = &problem.query;
    rule.breakpoints
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let a = rule.actions[i.min(rule.actions.len() - 1)];
            let (k2, m2, t2, r, cp, cost) = match a {
                Action::Continue(j) => {
                    let c = &problem.candidates[j];
                    let cp = q.conditional_power(z, c.i2c, c.df2c)?;
                    (
                        Some(c.params.k2),
                        Some(c.params.m2),
                        Some(c.params.t2),
                        Some(c.params.r),
                        cp,
                        problem.cost1 + c.cost,
                    )
                }
                _ => (None, None, None, None, 0.0, problem.cost1),
            };
            Ok(RuleRow { z1: z, action: a.label().into(), k2, m2, t2, r, cp, cost, density: q.stage_one_pdf(z) })
        })
        .collect()
}
