//! Interim estimation of correlation parameters and re-evaluation of the stage 2 choice.
//!
//! Estimation maximises the restricted likelihood of the stage 1 cell summaries
//! over the icc and, when identifiable, the cac or decay parameter. Cell-level
//! residual variance is treated as known: binomial variance follows from the
//! observed proportions, Gaussian variance from the planning total variance or
//! from a pooled within-cell variance when one is supplied. Cluster means alone
//! cannot separate the scale from the icc.

use crate::error::{Error, Result};
use crate::inference::{information_for, CombinationWeights};
use crate::model::{expit, logit, CorrelationFamily, CorrelationModel, OutcomeFamily, OutcomeModel, TrialLayout};
use crate::optimiser::{Action, Candidate, Criterion, DecisionRule, Problem};
use crate::power::StageTwoBounds;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Upper search limit for the icc.
const ICC_MAX: f64 = 0.95;
/// Lower search limit for cac or decay.
const SECONDARY_MIN: f64 = 0.01;
/// Estimates below this are reported as sitting on the zero boundary.
const BOUNDARY_EPS: f64 = 1e-4;
/// Half the 95% point of a chi-square on one degree of freedom.
const LR_HALF_CRIT: f64 = 0.5 * 3.841_458_820_694_124;
/// Upper bound on a computed conditional power, allowing for rounding.
const CP_CEILING: f64 = 1.0 + 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationOptions {
    pub intervals: bool,
    /// Continuity correction for binomial cells with all or no events, as a fraction of one participant.
    pub continuity: f64,
    /// Pooled within-cell variance for Gaussian outcomes. Without it the planning
    /// total variance is taken as known.
    pub within_variance: Option<f64>,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self { intervals: true, continuity: 0.5, within_variance: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub corr: CorrelationModel,
    pub icc_interval: Option<(f64, f64)>,
    pub secondary_interval: Option<(f64, f64)>,
    /// True when the icc estimate sits on the zero boundary.
    pub boundary: bool,
    /// False when the cac or decay parameter was not identifiable and was kept at its planning value.
    pub secondary_estimated: bool,
    pub restricted_loglik: f64,
}

struct ClusterData {
    periods: Vec<usize>,
    y: DVector<f64>,
    /// Residual variance per cell before scaling.
    e: Vec<f64>,
    x: DMatrix<f64>,
}

#[derive(Clone, Copy)]
enum Scale {
    /// Gaussian with known total variance.
    Total(f64),
    /// Known residual variance (pooled within-cell or binomial).
    Residual(f64),
}

struct Reml {
    clusters: Vec<ClusterData>,
    family: CorrelationFamily,
    scale: Scale,
    p: usize,
}

impl Reml {
    fn corr(&self, icc: f64, sec: f64) -> CorrelationModel {
        CorrelationModel { family: self.family, icc, cac: 1.0, decay: 1.0, dispersion: 1.0 }.with_secondary(sec)
    }

    /// Restricted log-likelihood up to a constant.
    fn loglik(&self, icc: f64, sec: f64) -> Option<f64> {
        let c = self.corr(icc, sec);
        let (tau2, emult) = match self.scale {
            Scale::Total(s2) => (icc * s2, (1.0 - icc) * s2),
            Scale::Residual(s2) => (icc / (1.0 - icc) * s2, 1.0),
        };
        let p = self.p;
        let mut m = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        let mut yvy = 0.0;
        let mut logdet = 0.0;
        for cl in &self.clusters {
            let n = cl.periods.len();
            let mut v = DMatrix::zeros(n, n);
            for a in 0..n {
                for d in 0..n {
                    v[(a, d)] = tau2 * c.period_correlation(cl.periods[a], cl.periods[d]);
                }
                v[(a, a)] += emult * cl.e[a];
            }
            let ch = Cholesky::new(v)?;
            logdet += 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let vx = ch.solve(&cl.x);
            let vy = ch.solve(&cl.y);
            m += cl.x.transpose() * &vx;
            b += cl.x.transpose() * &vy;
            yvy += cl.y.dot(&vy);
        }
        let mc = Cholesky::new(m)?;
        let beta = mc.solve(&b);
        let rss = yvy - b.dot(&beta);
        let logdet_m = 2.0 * mc.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(-0.5 * (rss + logdet + logdet_m))
    }

    fn secondary_identifiable(&self) -> bool {
        self.family != CorrelationFamily::Exchangeable && self.clusters.iter().any(|c| c.periods.len() >= 2)
    }
}

fn golden_max<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let mut best = if fc >= fd { (c, fc) } else { (d, fd) };
    for x in [lo, hi] {
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

/// Bisection for the point where a profile drops `LR_HALF_CRIT` below its maximum.
fn lr_limit<F: FnMut(f64) -> f64>(mut prof: F, inside: f64, outside: f64, max: f64) -> f64 {
    if max - prof(outside) <= LR_HALF_CRIT {
        return outside;
    }
    let (mut a, mut b) = (inside, outside);
    for _ in 0..50 {
        let mid = 0.5 * (a + b);
        if max - prof(mid) <= LR_HALF_CRIT {
            a = mid;
        } else {
            b = mid;
        }
        if (b - a).abs() < 1e-6 {
            break;
        }
    }
    0.5 * (a + b)
}

/// Restricted maximum likelihood estimate of the correlation parameters from
/// stage 1 cell summaries. `values` are cell means (Gaussian) or event
/// proportions (binomial) in `layout.stage_cells(1)` order. The family, and the
/// secondary parameter when it cannot be identified, come from `plan`.
pub fn estimate_theta(
    layout: &TrialLayout,
    values: &[f64],
    outcome: &OutcomeModel,
    plan: &CorrelationModel,
    opts: &EstimationOptions,
) -> Result<ThetaEstimate> {
    let cells = layout.stage_cells(1);
    if values.len() != cells.len() {
        return Err(Error::LengthMismatch(values.len(), cells.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stage 1 data".into()));
    }
    let periods = layout.observed_periods(Some(1));
    let mut col = vec![usize::MAX; layout.n_periods()];
    for (i, &p) in periods.iter().enumerate() {
        col[p] = i;
    }
    let p = periods.len() + 1;
    let gaussian = outcome.family == OutcomeFamily::GaussianIdentity;
    let mut clusters: Vec<ClusterData> = Vec::new();
    let mut pos = 0;
    let mut events = 0.0;
    let mut total = 0.0;
    for k in 0..layout.n_clusters() {
        let per: Vec<usize> = (0..layout.stage_boundary()).filter(|&t| layout.cell_size(k, t) > 0).collect();
        if per.is_empty() {
            continue;
        }
        let n = per.len();
        let mut y = DVector::zeros(n);
        let mut e = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, p);
        for (i, &t) in per.iter().enumerate() {
            let m = layout.cell_size(k, t) as f64;
            let v = values[pos + i];
            if gaussian {
                y[i] = v;
                e.push(1.0 / m);
                total += m;
            } else {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParameter(format!("proportion {v} outside [0, 1]")));
                }
                events += v * m;
                total += m;
                let lo = opts.continuity / m;
                let pt = v.clamp(lo, 1.0 - lo);
                y[i] = logit(pt);
                e.push(1.0 / (m * pt * (1.0 - pt)));
            }
            x[(i, col[t])] = 1.0;
            x[(i, p - 1)] = if layout.treated(k, t) { 1.0 } else { 0.0 };
        }
        pos += n;
        clusters.push(ClusterData { periods: per, y, e, x });
    }
    if clusters.len() < 2 {
        return Err(Error::NotEstimable("at least two clusters are needed".into()));
    }
    let n: usize = clusters.iter().map(|c| c.periods.len()).sum();
    if n <= p {
        return Err(Error::NotEstimable("no residual degrees of freedom".into()));
    }
    let scale = if gaussian {
        match opts.within_variance {
            Some(v) if v > 0.0 && v.is_finite() => Scale::Residual(v),
            Some(v) => return Err(Error::InvalidParameter(format!("within-cell variance {v}"))),
            None => Scale::Total(plan.dispersion),
        }
    } else {
        let pbar = (events / total).clamp(1e-6, 1.0 - 1e-6);
        Scale::Residual(1.0 / (pbar * (1.0 - pbar)))
    };
    let reml = Reml { clusters, family: plan.family, scale, p };
    let ll = |icc: f64, sec: f64| reml.loglik(icc, sec).unwrap_or(f64::NEG_INFINITY);

    let two_d = reml.secondary_identifiable();
    let sec_plan = plan.secondary().unwrap_or(1.0);
    let profile_icc = |icc: f64| -> (f64, f64) {
        if two_d {
            golden_max(|s| ll(icc, s), SECONDARY_MIN, 1.0, 1e-4)
        } else {
            (sec_plan, ll(icc, sec_plan))
        }
    };
    let (icc_hat, lmax) = golden_max(|icc| profile_icc(icc).1, 0.0, ICC_MAX, 1e-5);
    if !lmax.is_finite() {
        return Err(Error::NotEstimable("restricted likelihood could not be evaluated".into()));
    }
    let sec_hat = profile_icc(icc_hat).0;
    let boundary = icc_hat < BOUNDARY_EPS;
    let icc_hat = if boundary { 0.0 } else { icc_hat };

    let (icc_interval, secondary_interval) = if opts.intervals {
        let prof = |icc: f64| profile_icc(icc).1;
        let lo = if boundary { 0.0 } else { lr_limit(prof, icc_hat, 0.0, lmax) };
        let hi = lr_limit(prof, icc_hat, ICC_MAX, lmax);
        let sec = if two_d {
            let prof_s = |s: f64| golden_max(|icc| ll(icc, s), 0.0, ICC_MAX, 1e-4).1;
            Some((lr_limit(prof_s, sec_hat, SECONDARY_MIN, lmax), lr_limit(prof_s, sec_hat, 1.0, lmax)))
        } else {
            None
        };
        (Some((lo, hi)), sec)
    } else {
        (None, None)
    };
    let mut corr = reml.corr(icc_hat, sec_hat);
    corr.dispersion = plan.dispersion;
    Ok(ThetaEstimate {
        corr: corr.validated()?,
        icc_interval,
        secondary_interval,
        boundary,
        secondary_estimated: two_d,
        restricted_loglik: lmax,
    })
}

/// Interim report: statistic, estimates, the correlation model actually used and the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterimResult {
    pub z1: f64,
    pub theta_hat: Option<ThetaEstimate>,
    pub theta_used: CorrelationModel,
    /// True when estimation failed and the planning model was used instead.
    pub fallback: bool,
    pub action: Action,
    pub candidate: Option<Candidate>,
    /// Conditional power of the chosen design at the observed `z1`.
    pub cp: Option<f64>,
    pub weights: CombinationWeights,
    pub boundary: f64,
}

/// How the interim correlation model is formed from the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InterimPolicy {
    /// Use the estimate as is.
    #[default]
    Estimate,
    /// Use the larger of the planning and estimated icc.
    Conservative,
}

/// Choose the interim action with frozen weights and calibration, recomputing
/// conditional information under the estimated correlation model. The criterion
/// is evaluated at the lower breakpoint of the rule cell containing `z1`, as in
/// the planned rule.
pub fn interim_decide(
    problem: &Problem,
    rule: &DecisionRule,
    z1: f64,
    estimate: Result<ThetaEstimate>,
    policy: InterimPolicy,
) -> Result<InterimResult> {
    if !z1.is_finite() {
        return Err(Error::NonFinite("z1".into()));
    }
    let plan = problem.model.corr;
    let (theta_hat, fallback) = match estimate {
        Ok(e) => (Some(e), false),
        Err(_) => (None, true),
    };
    let mut used = theta_hat.map(|e| e.corr).unwrap_or(plan);
    if policy == InterimPolicy::Conservative {
        used.icc = used.icc.max(plan.icc);
    }
    let weights = *problem.weights();
    let q = &problem.query;
    let settings = q.settings();
    let mut out = InterimResult {
        z1,
        theta_hat,
        theta_used: used,
        fallback,
        action: Action::StopFutility,
        candidate: None,
        cp: None,
        weights,
        boundary: weights.boundary(),
    };
    let planned = rule.action_at(z1, settings.sides, q.delta());
    let Some(cell) = rule.cell_of(z1) else {
        out.action = planned;
        return Ok(out);
    };
    if planned == Action::StopEfficacy {
        out.action = planned;
        return Ok(out);
    }
    let z_snap = rule.breakpoints[cell];
    let picked = if used == plan {
        decide_lazily(problem, rule, z_snap, |j| Ok(problem.candidates[j].clone()))?
    } else {
        let outcome = &problem.model.outcome;
        decide_lazily(problem, rule, z_snap, |j| {
            let mut c = problem.candidates[j].clone();
            let info = information_for(&problem.design.combined_layout(&c.params)?, &used, outcome)?;
            c.i2c = info.i2c;
            c.df2c = info.df2c;
            Ok(c)
        })?
    };
    match picked {
        Some((j, c)) => {
            out.cp = Some(q.conditional_power(z1, c.i2c, c.df2c)?);
            out.action = Action::Continue(j);
            out.candidate = Some(c);
        }
        None => out.action = Action::StopFutility,
    }
    Ok(out)
}

/// Apply the rule's criterion and calibration at `z`, evaluating candidates on
/// demand in tie-break order. Costs do not depend on the correlation model, so
/// the order is that of the plan and evaluation can stop as soon as no later
/// candidate could be chosen. The choice equals that of evaluating every candidate.
fn decide_lazily<F>(
    problem: &Problem,
    rule: &DecisionRule,
    z: f64,
    mut candidate: F,
) -> Result<Option<(usize, Candidate)>>
where
    F: FnMut(usize) -> Result<Candidate>,
{
    let q = &problem.query;
    let lambda = rule.calibration;
    let mut bounds: Vec<(f64, StageTwoBounds)> = Vec::new();
    let mut best: Option<(usize, f64, Candidate)> = None;
    for (j, planned) in problem.candidates.iter().enumerate() {
        let ceiling = match rule.criterion {
            Criterion::CostPenalised => CP_CEILING - lambda * planned.cost,
            Criterion::BudgetConstrained => {
                if planned.cost > rule.calibration {
                    break;
                }
                CP_CEILING
            }
        };
        if ceiling < 0.0 && rule.criterion == Criterion::CostPenalised {
            break;
        }
        if matches!(&best, Some((_, v, _)) if ceiling <= *v) {
            break;
        }
        let c = candidate(j)?;
        let cp = if q.weights().w2() == 0.0 || (q.settings().small_sample && !(c.df2c >= 1.0)) {
            q.conditional_power(z, c.i2c, c.df2c)?
        } else {
            let b = match bounds.iter().find(|(d, _)| *d == c.df2c) {
                Some((_, b)) => *b,
                None => {
                    let b = q.stage_two_bounds(z, c.df2c);
                    bounds.push((c.df2c, b));
                    b
                }
            };
            q.conditional_power_with(&b, c.i2c, c.df2c)
        };
        let v = match rule.criterion {
            Criterion::CostPenalised => cp - lambda * c.cost,
            Criterion::BudgetConstrained => cp,
        };
        if best.as_ref().is_none_or(|(_, bv, _)| v > *bv) {
            best = Some((j, v, c));
        }
    }
    let floor = match rule.criterion {
        Criterion::CostPenalised => 0.0,
        Criterion::BudgetConstrained => rule.futility_floor,
    };
    Ok(best.filter(|(_, v, _)| *v >= floor).map(|(j, _, c)| (j, c)))
}

/// Cell values on the analysis scale: means for Gaussian outcomes, empirical
/// logits (with continuity correction) for binomial ones.
pub fn analysis_scale(layout: &TrialLayout, values: &[f64], outcome: &OutcomeModel, continuity: f64) -> Vec<f64> {
    match outcome.family {
        OutcomeFamily::GaussianIdentity => values.to_vec(),
        OutcomeFamily::BinomialLogit => layout
            .cells()
            .iter()
            .zip(values)
            .map(|(&(k, t), &v)| {
                let lo = continuity / layout.cell_size(k, t) as f64;
                logit(v.clamp(lo, 1.0 - lo))
            })
            .collect(),
    }
}

/// Inverse of the logit transform for reporting odds-scale summaries.
pub fn proportion(eta: f64) -> f64 {
    expit(eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_layout, LayoutKind};

    #[test]
    fn zero_between_cluster_variance_hits_boundary() {
        let l = build_layout(LayoutKind::Parallel, 4, 1, 10).unwrap();
        // identical cluster means within arm: no between-cluster variation beyond noise
        let y = vec![0.1, -0.1, 0.05, -0.05, 0.0, 0.02, -0.02, 0.0];
        let plan = CorrelationModel::exchangeable(0.05, 1.0).unwrap();
        let e = estimate_theta(&l, &y, &OutcomeModel::gaussian(), &plan, &EstimationOptions::default()).unwrap();
        assert!(e.boundary);
        assert_eq!(e.corr.icc, 0.0);
        assert_eq!(e.icc_interval.unwrap().0, 0.0);
    }

    #[test]
    fn single_cluster_is_not_estimable() {
        let l = TrialLayout::new(1, 2, vec![5, 5], vec![false, true], 2).unwrap();
        let plan = CorrelationModel::exchangeable(0.05, 1.0).unwrap();
        let r = estimate_theta(&l, &[0.0, 1.0], &OutcomeModel::gaussian(), &plan, &EstimationOptions::default());
        assert!(matches!(r, Err(Error::NotEstimable(_))));
    }

    #[test]
    fn lazy_decision_matches_full_evaluation() {
        use crate::model::StageOneDesign;
        use crate::optimiser::{
            calibrate, conditional_powers, select_budget_constrained, select_cost_penalised, CalibrationOptions,
            CostModel, PlanningModel, PlanningReference, Stage2Grid,
        };
        use crate::power::TestSettings;
        let corr = CorrelationModel::nested_exchangeable(0.05, 0.8, 1.0).unwrap();
        let model = PlanningModel {
            corr,
            outcome: OutcomeModel::gaussian(),
            delta: 0.25,
            settings: TestSettings { small_sample: true, ..Default::default() },
            cost: CostModel::new(30.0).unwrap(),
            reference: PlanningReference::Continue,
        };
        let d = StageOneDesign::Parallel { k1: 14, m1: 20, t1: 1, baseline: None };
        let p = Problem::new(d, &Stage2Grid::parallel(3, 100, 10), &model).unwrap();
        for crit in [Criterion::CostPenalised, Criterion::BudgetConstrained] {
            let rule = calibrate(&p, &CalibrationOptions::new(0.8, crit)).unwrap();
            for icc in [0.0, 0.02, 0.05, 0.15] {
                let used = CorrelationModel { icc, ..corr };
                let cands = p.candidates_under(&used).unwrap();
                for &z in rule.breakpoints.iter().step_by(7) {
                    let cps = conditional_powers(z, &cands, &p.query).unwrap();
                    let full = match crit {
                        Criterion::CostPenalised => select_cost_penalised(&cps, &cands, rule.calibration),
                        Criterion::BudgetConstrained => {
                            select_budget_constrained(&cps, &cands, rule.calibration, rule.futility_floor)
                        }
                    };
                    let lazy = decide_lazily(&p, &rule, z, |j| Ok(cands[j].clone())).unwrap();
                    let lazy = lazy.map_or(Action::StopFutility, |(j, _)| Action::Continue(j));
                    assert_eq!(full, lazy, "{crit:?} icc {icc} z {z}");
                }
            }
        }
    }

    #[test]
    fn golden_section_finds_interior_and_edge_maxima() {
        let (x, _) = golden_max(|x| -(x - 0.3).powi(2), 0.0, 1.0, 1e-8);
        assert!((x - 0.3).abs() < 1e-6);
        let (x, _) = golden_max(|x| -x, 0.0, 1.0, 1e-8);
        assert_eq!(x, 0.0);
    }
}
