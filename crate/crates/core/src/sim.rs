//! Monte Carlo operating characteristics of a two-stage plan.
//!
//! Cluster-period random effects are drawn with covariance `τ² R`. Stage 2
//! effects of continuing clusters are drawn conditionally on their stage 1
//! effects, so a replicate can be generated one stage at a time. Every replicate
//! has its own ChaCha stream keyed by `(seed, replicate)`, which makes results
//! independent of thread count and scheduling.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{combination_statistic, AnalysisModel, Sides};
use crate::interim::{analysis_scale, estimate_theta, interim_decide, EstimationOptions, InterimPolicy};
use crate::model::{build_covariance, CorrelationModel, OutcomeFamily, OutcomeModel, TrialLayout};
use crate::optimiser::{Action, DecisionRule, Problem};
use crate::par;

/// How the interim decision is made in each replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InterimMode {
    /// Follow the planned rule.
    #[default]
    Planned,
    /// Re-estimate the correlation parameters and recompute conditional information.
    Reestimate(InterimPolicy),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub truth: CorrelationModel,
    /// Treatment effect on the linear predictor scale.
    pub delta: f64,
    pub replicates: usize,
    pub seed: u64,
    pub interim: InterimMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub z1: f64,
    pub action: String,
    pub k2: Option<u32>,
    pub m2: Option<u32>,
    pub t2: Option<u32>,
    pub r: Option<f64>,
    pub z2c: Option<f64>,
    /// Combination statistic, present when stage 2 ran.
    pub z: Option<f64>,
    pub reject: bool,
    pub participants: u64,
    pub clusters: usize,
    pub cost: f64,
    pub icc_hat: Option<f64>,
    pub fallback: bool,
}

/// Proportion with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub estimate: f64,
    pub se: f64,
}

impl Rate {
    fn from_count(k: usize, n: usize) -> Self {
        let p = if n > 0 { k as f64 / n as f64 } else { f64::NAN };
        Self { estimate: p, se: (p * (1.0 - p) / n as f64).sqrt() }
    }

    fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { estimate: mean, se: (var / n).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub replicates: usize,
    /// Replicates whose analysis failed; excluded from every rate below.
    pub failures: usize,
    pub rejection: Rate,
    pub early_efficacy: Rate,
    pub early_futility: Rate,
    pub participants: Rate,
    pub clusters: Rate,
    pub cost: Rate,
    pub max_participants: u64,
    pub max_clusters: usize,
    pub max_cost: f64,
    /// Replicates where interim estimation failed and the planning model was used.
    pub estimation_fallbacks: usize,
    pub records: Vec<ReplicateRecord>,
}

/// Symmetric square root of a positive semi-definite matrix.
fn psd_root(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return a.clone();
    }
    let eig = SymmetricEigen::new(a.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn latent_cov(periods: &[usize], corr: &CorrelationModel, tau2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(periods.len(), periods.len(), |a, b| tau2 * corr.period_correlation(periods[a], periods[b]))
}

fn std_normals(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone)]
struct CellGen {
    eta: f64,
    size: u32,
    resid_var: f64,
}

/// Generation recipe for one cluster's cells in one stage.
#[derive(Debug, Clone)]
struct ClusterGen {
    /// Index of the cluster in the stage 1 layout, for continuing clusters.
    stage_one: Option<usize>,
    /// Conditional mean map from stage 1 effects.
    cond: DMatrix<f64>,
    root: DMatrix<f64>,
    cells: Vec<CellGen>,
}

/// Truth-side generator for a layout restricted to one stage.
struct Generator {
    family: OutcomeFamily,
    clusters: Vec<ClusterGen>,
}

impl Generator {
    fn cells_for(
        layout: &TrialLayout,
        k: usize,
        periods: &[usize],
        outcome: &OutcomeModel,
        truth: &CorrelationModel,
        delta: f64,
    ) -> Vec<CellGen> {
        periods
            .iter()
            .map(|&t| CellGen {
                eta: outcome.null_linear_predictor(t) + if layout.treated(k, t) { delta } else { 0.0 },
                size: layout.cell_size(k, t),
                resid_var: match outcome.family {
                    OutcomeFamily::GaussianIdentity => outcome.residual_variance(truth, t),
                    OutcomeFamily::BinomialLogit => 0.0,
                },
            })
            .collect()
    }

    fn stage_one(layout: &TrialLayout, outcome: &OutcomeModel, truth: &CorrelationModel, delta: f64) -> Self {
        let tau2 = outcome.cluster_variance(truth);
        let clusters = (0..layout.n_clusters())
            .filter_map(|k| {
                let per: Vec<usize> = (0..layout.stage_boundary()).filter(|&t| layout.cell_size(k, t) > 0).collect();
                if per.is_empty() {
                    return None;
                }
                Some(ClusterGen {
                    stage_one: None,
                    cond: DMatrix::zeros(per.len(), 0),
                    root: psd_root(&latent_cov(&per, truth, tau2)),
                    cells: Self::cells_for(layout, k, &per, outcome, truth, delta),
                })
            })
            .collect();
        Self { family: outcome.family, clusters }
    }

    /// Stage 2 generator for a combined layout whose stage 1 part matches the
    /// stage 1 layout cluster for cluster.
    fn stage_two(layout: &TrialLayout, outcome: &OutcomeModel, truth: &CorrelationModel, delta: f64) -> Result<Self> {
        let tau2 = outcome.cluster_variance(truth);
        let mut next = 0;
        let mut clusters = Vec::new();
        for k in 0..layout.n_clusters() {
            let p1: Vec<usize> = (0..layout.stage_boundary()).filter(|&t| layout.cell_size(k, t) > 0).collect();
            let p2: Vec<usize> =
                (layout.stage_boundary()..layout.n_periods()).filter(|&t| layout.cell_size(k, t) > 0).collect();
            let stage_one = if p1.is_empty() {
                None
            } else {
                next += 1;
                Some(next - 1)
            };
            if p2.is_empty() {
                continue;
            }
            let s22 = latent_cov(&p2, truth, tau2);
            let (cond, schur) = if p1.is_empty() || tau2 == 0.0 {
                (DMatrix::zeros(p2.len(), p1.len()), s22)
            } else {
                let s11 = latent_cov(&p1, truth, tau2);
                let s21 = DMatrix::from_fn(p2.len(), p1.len(), |a, b| tau2 * truth.period_correlation(p2[a], p1[b]));
                let inv = s11.pseudo_inverse(1e-12 * tau2).map_err(|e| Error::Singular(e.to_string()))?;
                let cond = &s21 * inv;
                let schur = &s22 - &cond * s21.transpose();
                (cond, schur)
            };
            clusters.push(ClusterGen {
                stage_one,
                cond,
                root: psd_root(&schur),
                cells: Self::cells_for(layout, k, &p2, outcome, truth, delta),
            });
        }
        Ok(Self { family: outcome.family, clusters })
    }

    fn draw_cells(&self, g: &ClusterGen, u: &DVector<f64>, rng: &mut ChaCha20Rng, out: &mut Vec<f64>) {
        for (c, &ui) in g.cells.iter().zip(u.iter()) {
            let eta = c.eta + ui;
            let v = match self.family {
                OutcomeFamily::GaussianIdentity => {
                    let e: f64 = StandardNormal.sample(rng);
                    eta + (c.resid_var / c.size as f64).sqrt() * e
                }
                OutcomeFamily::BinomialLogit => {
                    let p = crate::model::expit(eta);
                    let x = Binomial::new(c.size as u64, p).expect("probability in [0, 1]").sample(rng);
                    x as f64 / c.size as f64
                }
            };
            out.push(v);
        }
    }

    /// Stage 1 cell values (in `stage_cells(1)` order) and per-cluster effects.
    fn draw_stage_one(&self, rng: &mut ChaCha20Rng) -> (Vec<f64>, Vec<DVector<f64>>) {
        let mut y = Vec::new();
        let mut latents = Vec::with_capacity(self.clusters.len());
        for g in &self.clusters {
            let u = &g.root * std_normals(rng, g.cells.len());
            self.draw_cells(g, &u, rng, &mut y);
            latents.push(u);
        }
        (y, latents)
    }

    /// Stage 2 cell values, one vector per generated cluster.
    fn draw_stage_two(&self, latents: &[DVector<f64>], rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
        self.clusters
            .iter()
            .map(|g| {
                let mut u = &g.root * std_normals(rng, g.cells.len());
                if let Some(j) = g.stage_one {
                    if g.cond.ncols() > 0 {
                        u += &g.cond * &latents[j];
                    }
                }
                let mut y = Vec::with_capacity(g.cells.len());
                self.draw_cells(g, &u, rng, &mut y);
                y
            })
            .collect()
    }
}

/// Analysis and generation prepared once per stage 2 candidate.
struct PreparedCandidate {
    layout: TrialLayout,
    analysis: AnalysisModel,
    generator: Generator,
}

fn prepare(problem: &Problem, j: usize, truth: &CorrelationModel, delta: f64) -> Result<PreparedCandidate> {
    let model = &problem.model;
    let layout = problem.design.combined_layout(&problem.candidates[j].params)?;
    let cov = build_covariance(&layout, &model.corr, &model.outcome)?;
    Ok(PreparedCandidate {
        analysis: AnalysisModel::new(&layout, &cov)?,
        generator: Generator::stage_two(&layout, &model.outcome, truth, delta)?,
        layout,
    })
}

/// Stream for one replicate.
pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Simulate cell-level outcomes for any layout under `truth`, in `cells()` order.
pub fn simulate_layout(
    layout: &TrialLayout,
    outcome: &OutcomeModel,
    truth: &CorrelationModel,
    delta: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>> {
    let tau2 = outcome.cluster_variance(truth);
    let gen = Generator { family: outcome.family, clusters: Vec::new() };
    let mut y = Vec::with_capacity(layout.cells().len());
    for k in 0..layout.n_clusters() {
        let per: Vec<usize> = (0..layout.n_periods()).filter(|&t| layout.cell_size(k, t) > 0).collect();
        let g = ClusterGen {
            stage_one: None,
            cond: DMatrix::zeros(per.len(), 0),
            root: psd_root(&latent_cov(&per, truth, tau2)),
            cells: Generator::cells_for(layout, k, &per, outcome, truth, delta),
        };
        let u = &g.root * std_normals(rng, per.len());
        gen.draw_cells(&g, &u, rng, &mut y);
    }
    Ok(y)
}

fn rejects(z: f64, crit: f64, sides: Sides, direction: f64) -> bool {
    match sides {
        Sides::Two => z.abs() > crit,
        Sides::One => direction * z > crit,
    }
}

struct Context<'a> {
    problem: &'a Problem,
    rule: &'a DecisionRule,
    scenario: &'a Scenario,
    stage_one_analysis: AnalysisModel,
    stage_one_gen: Generator,
    prepared: Vec<OnceLock<std::result::Result<PreparedCandidate, Error>>>,
}

impl Context<'_> {
    fn replicate(&self, index: usize) -> Result<ReplicateRecord> {
        let p = self.problem;
        let q = &p.query;
        let settings = q.settings();
        let outcome = &p.model.outcome;
        let continuity = EstimationOptions::default().continuity;
        let mut rng = replicate_rng(self.scenario.seed, index);

        let (y1, latents) = self.stage_one_gen.draw_stage_one(&mut rng);
        let s1 = p.stage_one.stage_cells(1);
        let y1a = match outcome.family {
            OutcomeFamily::GaussianIdentity => y1.clone(),
            OutcomeFamily::BinomialLogit => s1
                .iter()
                .zip(&y1)
                .map(|(&(k, t), &v)| {
                    let lo = continuity / p.stage_one.cell_size(k, t) as f64;
                    crate::model::logit(v.clamp(lo, 1.0 - lo))
                })
                .collect(),
        };
        let z1 = self.stage_one_analysis.stage_one(&y1a, settings.small_sample)?.z;

        let mut rec = ReplicateRecord {
            replicate: index,
            z1,
            action: String::new(),
            k2: None,
            m2: None,
            t2: None,
            r: None,
            z2c: None,
            z: None,
            reject: false,
            participants: p.n1,
            clusters: p.k1,
            cost: p.cost1,
            icc_hat: None,
            fallback: false,
        };
        let action = match self.scenario.interim {
            InterimMode::Planned => self.rule.action_at(z1, settings.sides, q.delta()),
            InterimMode::Reestimate(policy) => {
                let opts = EstimationOptions { intervals: false, ..Default::default() };
                let est = estimate_theta(&p.stage_one, &y1, outcome, &p.model.corr, &opts);
                let res = interim_decide(p, self.rule, z1, est, policy)?;
                rec.icc_hat = res.theta_hat.map(|e| e.corr.icc);
                rec.fallback = res.fallback;
                res.action
            }
        };
        rec.action = action.label().to_string();
        let w = p.weights();
        match action {
            Action::StopEfficacy => rec.reject = true,
            Action::StopFutility => {}
            Action::Continue(j) => {
                let prep = self.prepared[j]
                    .get_or_init(|| prepare(p, j, &self.scenario.truth, self.scenario.delta))
                    .as_ref()
                    .map_err(Clone::clone)?;
                let y2 = prep.generator.draw_stage_two(&latents, &mut rng);
                let y = assemble(&prep.layout, &y1, &y2);
                let y = analysis_scale(&prep.layout, &y, outcome, continuity);
                let z2c = prep.analysis.stage_two(&y, settings.small_sample)?.z;
                let z = combination_statistic(z1, z2c, w);
                let c = &p.candidates[j];
                rec.k2 = Some(c.params.k2);
                rec.m2 = Some(c.params.m2);
                rec.t2 = Some(c.params.t2);
                rec.r = Some(c.params.r);
                rec.z2c = Some(z2c);
                rec.z = Some(z);
                rec.reject = rejects(z, w.critical(), settings.sides, if q.delta() < 0.0 { -1.0 } else { 1.0 });
                rec.participants += c.participants;
                rec.clusters += c.new_clusters as usize;
                rec.cost += c.cost;
            }
        }
        Ok(rec)
    }
}

/// Interleave stage 1 values (in `stage_cells(1)` order) with stage 2 values
/// per cluster into `cells()` order of the combined layout.
fn assemble(layout: &TrialLayout, y1: &[f64], y2: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.cells().len());
    let (mut p1, mut c2) = (0, 0);
    for k in 0..layout.n_clusters() {
        let n1 = (0..layout.stage_boundary()).filter(|&t| layout.cell_size(k, t) > 0).count();
        let n2 = (layout.stage_boundary()..layout.n_periods()).filter(|&t| layout.cell_size(k, t) > 0).count();
        out.extend_from_slice(&y1[p1..p1 + n1]);
        p1 += n1;
        if n2 > 0 {
            out.extend_from_slice(&y2[c2]);
            c2 += 1;
        }
    }
    out
}

/// Run a scenario for a calibrated plan.
pub fn run_scenario(problem: &Problem, rule: &DecisionRule, scenario: &Scenario) -> Result<SimulationSummary> {
    scenario.truth.validate()?;
    if scenario.replicates == 0 {
        return Err(Error::InvalidParameter("replicates must be positive".into()));
    }
    if !scenario.delta.is_finite() {
        return Err(Error::NonFinite("delta".into()));
    }
    let model = &problem.model;
    let cov1 = build_covariance(&problem.stage_one, &model.corr, &model.outcome)?;
    let ctx = Context {
        problem,
        rule,
        scenario,
        stage_one_analysis: AnalysisModel::new(&problem.stage_one, &cov1)?,
        stage_one_gen: Generator::stage_one(&problem.stage_one, &model.outcome, &scenario.truth, scenario.delta),
        prepared: (0..problem.candidates.len()).map(|_| OnceLock::new()).collect(),
    };
    let results = par::map_range(scenario.replicates, |i| ctx.replicate(i));
    let mut records = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(_) => failures += 1,
        }
    }
    let n = records.len();
    if n == 0 {
        return Err(Error::NotEstimable("every replicate failed".into()));
    }
    let count = |f: &dyn Fn(&ReplicateRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let values = |f: &dyn Fn(&ReplicateRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    Ok(SimulationSummary {
        replicates: scenario.replicates,
        failures,
        rejection: Rate::from_count(count(&|r| r.reject), n),
        early_efficacy: Rate::from_count(count(&|r| r.action == Action::StopEfficacy.label()), n),
        early_futility: Rate::from_count(count(&|r| r.action == Action::StopFutility.label()), n),
        participants: Rate::from_values(&values(&|r| r.participants as f64)),
        clusters: Rate::from_values(&values(&|r| r.clusters as f64)),
        cost: Rate::from_values(&values(&|r| r.cost)),
        max_participants: records.iter().map(|r| r.participants).max().unwrap_or(0),
        max_clusters: records.iter().map(|r| r.clusters).max().unwrap_or(0),
        max_cost: records.iter().map(|r| r.cost).fold(f64::NEG_INFINITY, f64::max),
        estimation_fallbacks: count(&|r| r.fallback),
        records,
    })
}
