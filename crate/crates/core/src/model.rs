//! Trial layouts, correlation models and the cluster-period working covariance.
//!
//! Outcomes are represented at cluster-period resolution: each observed cell
//! carries the mean of its `m` participants. For the compound-symmetric and
//! decay families this aggregation loses no information about the treatment
//! effect, and it keeps every covariance block at most `T x T`.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationFamily {
    Exchangeable,
    NestedExchangeable,
    ExponentialDecay,
}

/// Variance and correlation parameters of the working model.
///
/// `icc` is the share of the individual-level variance due to the cluster
/// effect. `cac` is only read for the nested-exchangeable family and `decay`
/// only for exponential decay; the other is kept at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationModel {
    pub family: CorrelationFamily,
    pub icc: f64,
    #[serde(default = "one")]
    pub cac: f64,
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default = "one")]
    pub dispersion: f64,
}

fn one() -> f64 {
    1.0
}

impl CorrelationModel {
    pub fn exchangeable(icc: f64, dispersion: f64) -> Result<Self> {
        Self { family: CorrelationFamily::Exchangeable, icc, cac: 1.0, decay: 1.0, dispersion }.validated()
    }

    pub fn nested_exchangeable(icc: f64, cac: f64, dispersion: f64) -> Result<Self> {
        Self { family: CorrelationFamily::NestedExchangeable, icc, cac, decay: 1.0, dispersion }.validated()
    }

    pub fn exponential_decay(icc: f64, decay: f64, dispersion: f64) -> Result<Self> {
        Self { family: CorrelationFamily::ExponentialDecay, icc, cac: 1.0, decay, dispersion }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.icc) {
            return Err(Error::InvalidParameter(format!("icc must lie in [0, 1), got {}", self.icc)));
        }
        if !(self.cac > 0.0 && self.cac <= 1.0) {
            return Err(Error::InvalidParameter(format!("cac must lie in (0, 1], got {}", self.cac)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidParameter(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err(Error::InvalidParameter(format!("dispersion must be positive, got {}", self.dispersion)));
        }
        Ok(())
    }

    /// Correlation between cluster effects in periods `s` and `t`.
    pub fn period_correlation(&self, s: usize, t: usize) -> f64 {
        if s == t {
            return 1.0;
        }
        match self.family {
            CorrelationFamily::Exchangeable => 1.0,
            CorrelationFamily::NestedExchangeable => self.cac,
            CorrelationFamily::ExponentialDecay => self.decay.powi(s.abs_diff(t) as i32),
        }
    }

    /// The family's second parameter (cac or decay), or `None` for exchangeable.
    pub fn secondary(&self) -> Option<f64> {
        match self.family {
            CorrelationFamily::Exchangeable => None,
            CorrelationFamily::NestedExchangeable => Some(self.cac),
            CorrelationFamily::ExponentialDecay => Some(self.decay),
        }
    }

    pub fn with_secondary(mut self, value: f64) -> Self {
        match self.family {
            CorrelationFamily::Exchangeable => {}
            CorrelationFamily::NestedExchangeable => self.cac = value,
            CorrelationFamily::ExponentialDecay => self.decay = value,
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeFamily {
    GaussianIdentity,
    BinomialLogit,
}

/// Mean model under the null: family, baseline and per-period nuisance effects.
///
/// For the Gaussian family `baseline` is the intercept; for the binomial family
/// it is the baseline probability. Period effects are on the linear predictor
/// scale; an empty vector means no period effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeModel {
    pub family: OutcomeFamily,
    pub baseline: f64,
    #[serde(default)]
    pub period_effects: Vec<f64>,
}

impl OutcomeModel {
    pub fn gaussian() -> Self {
        Self { family: OutcomeFamily::GaussianIdentity, baseline: 0.0, period_effects: Vec::new() }
    }

    pub fn binomial(baseline: f64) -> Result<Self> {
        let m = Self { family: OutcomeFamily::BinomialLogit, baseline, period_effects: Vec::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == OutcomeFamily::BinomialLogit && !(self.baseline > 0.0 && self.baseline < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "binomial baseline probability must lie in (0, 1), got {}",
                self.baseline
            )));
        }
        if !self.baseline.is_finite() || self.period_effects.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome model".into()));
        }
        Ok(())
    }

    pub fn period_effect(&self, period: usize) -> f64 {
        self.period_effects.get(period).copied().unwrap_or(0.0)
    }

    /// Linear predictor under the null in `period`.
    pub fn null_linear_predictor(&self, period: usize) -> f64 {
        let base = match self.family {
            OutcomeFamily::GaussianIdentity => self.baseline,
            OutcomeFamily::BinomialLogit => logit(self.baseline),
        };
        base + self.period_effect(period)
    }

    pub fn inverse_link(&self, eta: f64) -> f64 {
        match self.family {
            OutcomeFamily::GaussianIdentity => eta,
            OutcomeFamily::BinomialLogit => expit(eta),
        }
    }

    /// GLM iterated weight per unit dispersion at the null mean of `period`.
    pub fn glm_weight(&self, period: usize) -> f64 {
        match self.family {
            OutcomeFamily::GaussianIdentity => 1.0,
            OutcomeFamily::BinomialLogit => {
                let mu = expit(self.null_linear_predictor(period));
                mu * (1.0 - mu)
            }
        }
    }

    /// Individual-level residual variance in `period` given the correlation model.
    pub fn residual_variance(&self, corr: &CorrelationModel, period: usize) -> f64 {
        match self.family {
            OutcomeFamily::GaussianIdentity => (1.0 - corr.icc) * corr.dispersion,
            OutcomeFamily::BinomialLogit => corr.dispersion / self.glm_weight(period),
        }
    }

    /// Residual variance at the baseline mean, the reference for the icc.
    pub fn reference_residual_variance(&self, corr: &CorrelationModel) -> f64 {
        match self.family {
            OutcomeFamily::GaussianIdentity => (1.0 - corr.icc) * corr.dispersion,
            OutcomeFamily::BinomialLogit => corr.dispersion / (self.baseline * (1.0 - self.baseline)),
        }
    }

    /// Variance of the cluster random effect, `icc / (1 - icc)` times the reference residual variance.
    pub fn cluster_variance(&self, corr: &CorrelationModel) -> f64 {
        match self.family {
            OutcomeFamily::GaussianIdentity => corr.icc * corr.dispersion,
            OutcomeFamily::BinomialLogit => corr.icc / (1.0 - corr.icc) * self.reference_residual_variance(corr),
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cluster-by-period grid with cell sizes, treatment indicators and the stage split.
///
/// Periods are 0-based internally; the stage boundary `t1` means periods
/// `0..t1` belong to stage 1 and `t1..n_periods` to stage 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLayout {
    n_clusters: usize,
    n_periods: usize,
    cell_sizes: Vec<u32>,
    treatment: Vec<bool>,
    stage_boundary: usize,
}

impl TrialLayout {
    pub fn new(
        n_clusters: usize,
        n_periods: usize,
        cell_sizes: Vec<u32>,
        treatment: Vec<bool>,
        stage_boundary: usize,
    ) -> Result<Self> {
        if n_clusters == 0 || n_periods == 0 {
            return Err(Error::InvalidDimension("layout needs at least one cluster and one period".into()));
        }
        let cells = n_clusters * n_periods;
        if cell_sizes.len() != cells || treatment.len() != cells {
            return Err(Error::InvalidDimension(format!(
                "expected {cells} cells, got {} sizes and {} treatment flags",
                cell_sizes.len(),
                treatment.len()
            )));
        }
        if stage_boundary == 0 || stage_boundary > n_periods {
            return Err(Error::InvalidDimension(format!("stage boundary {stage_boundary} outside [1, {n_periods}]")));
        }
        Ok(Self { n_clusters, n_periods, cell_sizes, treatment, stage_boundary })
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn stage_boundary(&self) -> usize {
        self.stage_boundary
    }

    pub fn has_stage_two(&self) -> bool {
        self.stage_boundary < self.n_periods
    }

    pub fn cell_size(&self, cluster: usize, period: usize) -> u32 {
        self.cell_sizes[cluster * self.n_periods + period]
    }

    pub fn treated(&self, cluster: usize, period: usize) -> bool {
        self.treatment[cluster * self.n_periods + period]
    }

    pub fn sizes_row(&self, cluster: usize) -> &[u32] {
        &self.cell_sizes[cluster * self.n_periods..(cluster + 1) * self.n_periods]
    }

    pub fn treatment_row(&self, cluster: usize) -> &[bool] {
        &self.treatment[cluster * self.n_periods..(cluster + 1) * self.n_periods]
    }

    pub fn is_stage_one(&self, period: usize) -> bool {
        period < self.stage_boundary
    }

    /// Observed cells `(cluster, period)`, cluster-major with periods ascending.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.n_clusters {
            for t in 0..self.n_periods {
                if self.cell_size(k, t) > 0 {
                    out.push((k, t));
                }
            }
        }
        out
    }

    /// Observed cells of one stage (1 or 2), cluster-major.
    pub fn stage_cells(&self, stage: u8) -> Vec<(usize, usize)> {
        self.cells().into_iter().filter(|&(_, t)| self.is_stage_one(t) == (stage == 1)).collect()
    }

    /// Number of observed cells, optionally restricted to one stage.
    pub fn n_cells(&self, stage: Option<u8>) -> usize {
        let (lo, hi) = match stage {
            Some(1) => (0, self.stage_boundary),
            Some(_) => (self.stage_boundary, self.n_periods),
            None => (0, self.n_periods),
        };
        (0..self.n_clusters).map(|k| self.sizes_row(k)[lo..hi].iter().filter(|&&m| m > 0).count()).sum()
    }

    /// Periods of a stage with at least one observed cell.
    pub fn observed_periods(&self, stage: Option<u8>) -> Vec<usize> {
        (0..self.n_periods)
            .filter(|&t| match stage {
                Some(1) => self.is_stage_one(t),
                Some(_) => !self.is_stage_one(t),
                None => true,
            })
            .filter(|&t| (0..self.n_clusters).any(|k| self.cell_size(k, t) > 0))
            .collect()
    }

    pub fn total_participants(&self) -> u64 {
        self.cell_sizes.iter().map(|&m| m as u64).sum()
    }

    pub fn stage_participants(&self, stage: u8) -> u64 {
        self.stage_cells(stage).iter().map(|&(k, t)| self.cell_size(k, t) as u64).sum()
    }

    fn cluster_in_stage(&self, k: usize, stage: u8) -> bool {
        (0..self.n_periods).any(|t| self.cell_size(k, t) > 0 && self.is_stage_one(t) == (stage == 1))
    }

    pub fn stage_clusters(&self, stage: u8) -> usize {
        (0..self.n_clusters).filter(|&k| self.cluster_in_stage(k, stage)).count()
    }

    /// Clusters observed in stage 2 but not in stage 1.
    pub fn new_stage_two_clusters(&self) -> usize {
        (0..self.n_clusters).filter(|&k| self.cluster_in_stage(k, 2) && !self.cluster_in_stage(k, 1)).count()
    }

    /// The stage 1 part of the layout as a single-stage layout (stage 2-only clusters dropped).
    pub fn stage_one(&self) -> Result<TrialLayout> {
        let keep: Vec<usize> = (0..self.n_clusters).filter(|&k| self.cluster_in_stage(k, 1)).collect();
        let t1 = self.stage_boundary;
        let mut sizes = Vec::with_capacity(keep.len() * t1);
        let mut treat = Vec::with_capacity(keep.len() * t1);
        for &k in &keep {
            sizes.extend_from_slice(&self.sizes_row(k)[..t1]);
            treat.extend_from_slice(&self.treatment_row(k)[..t1]);
        }
        TrialLayout::new(keep.len(), t1, sizes, treat, t1)
    }
}

/// Named layout patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayoutKind {
    /// `k` clusters per arm, treated arm first, single stage.
    Parallel,
    /// As parallel, with a leading all-control baseline period.
    ParallelBaseline,
    /// `k` clusters, one switching per step, single stage.
    SteppedWedge,
    /// Stepped-wedge first stage, then a roll-out interpolating between a parallel
    /// split (`r = 0`) and a stepped-wedge roll-out (`r = 1`).
    Staggered { r: f64, stage_boundary: usize },
}

/// Period (0-based) at which stepped-wedge cluster `j` (0-based) starts treatment.
pub fn stepped_wedge_switch(j: usize, k: usize, t: usize) -> usize {
    // 1-based: 1 + ceil(j (t - 1) / k)
    let j1 = j + 1;
    (j1 * (t - 1)).div_ceil(k)
}

pub fn build_layout(kind: LayoutKind, k: usize, t: usize, m: u32) -> Result<TrialLayout> {
    if k == 0 || t == 0 || m == 0 {
        return Err(Error::InvalidDimension(format!("k = {k}, t = {t}, m = {m} must all be positive")));
    }
    match kind {
        LayoutKind::Parallel => parallel_layout(k, t, m, false),
        LayoutKind::ParallelBaseline => parallel_layout(k, t, m, true),
        LayoutKind::SteppedWedge => {
            if t < 2 {
                return Err(Error::InvalidDimension("stepped-wedge layout needs at least 2 periods".into()));
            }
            let mut treat = Vec::with_capacity(k * t);
            for j in 0..k {
                let s = stepped_wedge_switch(j, k, t);
                treat.extend((0..t).map(|p| p >= s));
            }
            TrialLayout::new(k, t, vec![m; k * t], treat, t)
        }
        LayoutKind::Staggered { r, stage_boundary } => {
            if t < 2 {
                return Err(Error::InvalidDimension("staggered layout needs at least 2 periods".into()));
            }
            if stage_boundary == 0 || stage_boundary > t {
                return Err(Error::InvalidDimension(format!("stage boundary {stage_boundary} outside [1, {t}]")));
            }
            let design =
                StageOneDesign::Staggered { k: k as u32, plan_periods: t as u32, t1: stage_boundary as u32, m1: m };
            design.combined_layout(&Stage2Params { k2: 0, m2: m, t2: (t - stage_boundary) as u32, r })
        }
    }
}

fn parallel_layout(k: usize, t: usize, m: u32, baseline: bool) -> Result<TrialLayout> {
    if baseline && t < 2 {
        return Err(Error::InvalidDimension("baseline layout needs at least 2 periods".into()));
    }
    let n = 2 * k;
    let mut treat = Vec::with_capacity(n * t);
    for c in 0..n {
        let arm = c < k;
        treat.extend((0..t).map(|p| arm && !(baseline && p == 0)));
    }
    TrialLayout::new(n, t, vec![m; n * t], treat, t)
}

/// Stage 2 design parameters `g`: new clusters per arm, cluster-period size,
/// number of stage 2 periods and the staggering fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Params {
    #[serde(default)]
    pub k2: u32,
    pub m2: u32,
    #[serde(default = "one_u32")]
    pub t2: u32,
    #[serde(default = "one")]
    pub r: f64,
}

fn one_u32() -> u32 {
    1
}

/// A stage 1 design from one of the supported families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StageOneDesign {
    /// Two-arm parallel design with `k1` clusters per arm observed for `t1`
    /// periods of `m1`, optionally preceded by an all-control baseline period.
    /// Stage 2 observes every continuing cluster plus `k2` new clusters per arm.
    Parallel {
        k1: u32,
        m1: u32,
        #[serde(default = "one_u32")]
        t1: u32,
        #[serde(default)]
        baseline: Option<u32>,
    },
    /// Stepped-wedge roll-out of `k` clusters planned over `plan_periods`
    /// periods, interrupted after `t1` periods of size `m1`.
    Staggered { k: u32, plan_periods: u32, t1: u32, m1: u32 },
}

impl StageOneDesign {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StageOneDesign::Parallel { k1, m1, t1, baseline } => {
                k1 > 0 && m1 > 0 && t1 > 0 && baseline.is_none_or(|b| b > 0)
            }
            StageOneDesign::Staggered { k, plan_periods, t1, m1 } => k > 0 && m1 > 0 && t1 > 0 && plan_periods >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDimension(format!("invalid stage 1 design {self:?}")))
        }
    }

    /// Number of stage 1 periods, including any baseline period.
    pub fn stage_one_periods(&self) -> usize {
        match *self {
            StageOneDesign::Parallel { t1, baseline, .. } => t1 as usize + baseline.is_some() as usize,
            StageOneDesign::Staggered { t1, .. } => t1 as usize,
        }
    }

    pub fn stage_one_layout(&self) -> Result<TrialLayout> {
        self.combined_layout(&Stage2Params { k2: 0, m2: 0, t2: 0, r: 1.0 })
    }

    /// The complete two-stage layout for stage 2 parameters `g`. A `g` with no
    /// stage 2 cells (`m2 = 0` or `t2 = 0`) yields the single-stage layout.
    pub fn combined_layout(&self, g: &Stage2Params) -> Result<TrialLayout> {
        self.validate()?;
        let t2 = if g.m2 == 0 { 0 } else { g.t2 as usize };
        match *self {
            StageOneDesign::Parallel { k1, m1, t1, baseline } => {
                let (k1, k2) = (k1 as usize, if t2 == 0 { 0 } else { g.k2 as usize });
                let pre = baseline.is_some() as usize;
                let s1 = pre + t1 as usize;
                let t = s1 + t2;
                let per_arm = k1 + k2;
                let mut sizes = Vec::with_capacity(2 * per_arm * t);
                let mut treat = Vec::with_capacity(2 * per_arm * t);
                for arm in [true, false] {
                    for c in 0..per_arm {
                        let continuing = c < k1;
                        for p in 0..t {
                            let m = if p < s1 {
                                if !continuing {
                                    0
                                } else if p < pre {
                                    baseline.unwrap_or(0)
                                } else {
                                    m1
                                }
                            } else {
                                g.m2
                            };
                            sizes.push(m);
                            treat.push(arm && p >= pre);
                        }
                    }
                }
                TrialLayout::new(2 * per_arm, t, sizes, treat, s1)
            }
            StageOneDesign::Staggered { k, plan_periods, t1, m1 } => {
                if g.k2 != 0 && t2 > 0 {
                    return Err(Error::InvalidParameter("staggered designs do not recruit new clusters".into()));
                }
                if !(0.0..=1.0).contains(&g.r) {
                    return Err(Error::InvalidParameter(format!("staggering r must lie in [0, 1], got {}", g.r)));
                }
                let (k, t0, t1) = (k as usize, plan_periods as usize, t1 as usize);
                let t = t1 + t2;
                let switches = staggered_switches(k, t0, t1, t2, g.r);
                let mut sizes = Vec::with_capacity(k * t);
                let mut treat = Vec::with_capacity(k * t);
                for &s in &switches {
                    for p in 0..t {
                        sizes.push(if p < t1 { m1 } else { g.m2 });
                        treat.push(p >= s);
                    }
                }
                TrialLayout::new(k, t, sizes, treat, t1)
            }
        }
    }
}

/// Switch periods (0-based; `>= t1 + t2` means never treated) for a staggered
/// design. Stage 1 follows the planned stepped-wedge roll-out. Clusters still
/// untreated at the boundary are re-timed: with `r = 0` just enough of them start
/// at once to make the allocation 1:1 and the rest stay in control, with `r = 1`
/// they roll out evenly over the stage 2 periods, and in between the switch
/// times are interpolated and rounded.
pub fn staggered_switches(k: usize, plan_periods: usize, t1: usize, t2: usize, r: f64) -> Vec<usize> {
    let planned: Vec<usize> = (0..k).map(|j| stepped_wedge_switch(j, k, plan_periods)).collect();
    if t2 == 0 {
        return planned;
    }
    let t = t1 + t2;
    let already = planned.iter().filter(|&&s| s < t1).count();
    let remaining: Vec<usize> = (0..k).filter(|&j| planned[j] >= t1).collect();
    let n_rem = remaining.len();
    let to_start = (k / 2).saturating_sub(already).min(n_rem);
    let mut out = planned.clone();
    for (i, &j) in remaining.iter().enumerate() {
        // 0-based parallel target: start immediately, or never
        let parallel = if i < to_start { t1 } else { t };
        // even roll-out: 1-based t1 + ceil((i + 1) t2 / n_rem) is treated from that period on
        let rollout = t1 + ((i + 1) * t2).div_ceil(n_rem) - 1;
        let s = (1.0 - r) * parallel as f64 + r * rollout as f64;
        out[j] = (s.round() as usize).clamp(t1, t);
    }
    out
}

/// Covariance block shared by all clusters with the same cell-size pattern.
#[derive(Debug, Clone)]
pub struct ClusterBlock {
    /// Observed periods, ascending.
    pub periods: Vec<usize>,
    pub sizes: Vec<u32>,
    /// Number of leading cells that belong to stage 1.
    pub n_stage_one: usize,
    pub matrix: DMatrix<f64>,
    /// GLM iterated weights per observed cell (participants times unit weight over dispersion).
    pub weights: Vec<f64>,
}

impl ClusterBlock {
    fn sub(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        self.matrix.view((rows.start, cols.start), (rows.len(), cols.len())).into_owned()
    }

    pub fn sigma11(&self) -> DMatrix<f64> {
        self.sub(0..self.n_stage_one, 0..self.n_stage_one)
    }

    pub fn sigma12(&self) -> DMatrix<f64> {
        let n = self.periods.len();
        self.sub(0..self.n_stage_one, self.n_stage_one..n)
    }

    pub fn sigma22(&self) -> DMatrix<f64> {
        let n = self.periods.len();
        self.sub(self.n_stage_one..n, self.n_stage_one..n)
    }
}

/// Block-diagonal (over clusters) working covariance of cluster-period means.
#[derive(Debug, Clone)]
pub struct WorkingCovariance {
    blocks: Vec<ClusterBlock>,
    cluster_block: Vec<usize>,
}

impl WorkingCovariance {
    pub fn n_clusters(&self) -> usize {
        self.cluster_block.len()
    }

    pub fn block(&self, cluster: usize) -> &ClusterBlock {
        &self.blocks[self.cluster_block[cluster]]
    }

    pub fn block_index(&self, cluster: usize) -> usize {
        self.cluster_block[cluster]
    }

    pub fn unique_blocks(&self) -> &[ClusterBlock] {
        &self.blocks
    }

    /// Stage-partitioned dense matrix over all observed cells: stage 1 cells
    /// (cluster-major) first, then stage 2 cells. Also returns the cell order.
    pub fn dense(&self, layout: &TrialLayout) -> (DMatrix<f64>, Vec<(usize, usize)>) {
        let order: Vec<(usize, usize)> = layout.stage_cells(1).into_iter().chain(layout.stage_cells(2)).collect();
        let pos: HashMap<(usize, usize), usize> = order.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let n = order.len();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..self.n_clusters() {
            let b = self.block(k);
            for (a, &pa) in b.periods.iter().enumerate() {
                for (c, &pc) in b.periods.iter().enumerate() {
                    out[(pos[&(k, pa)], pos[&(k, pc)])] = b.matrix[(a, c)];
                }
            }
        }
        (out, order)
    }
}

pub fn build_covariance(
    layout: &TrialLayout,
    corr: &CorrelationModel,
    outcome: &OutcomeModel,
) -> Result<WorkingCovariance> {
    corr.validate()?;
    outcome.validate()?;
    if !outcome.period_effects.is_empty() && outcome.period_effects.len() != layout.n_periods() {
        return Err(Error::InvalidDimension(format!(
            "{} period effects for a {}-period layout",
            outcome.period_effects.len(),
            layout.n_periods()
        )));
    }
    let tau2 = outcome.cluster_variance(corr);
    let mut rows: Vec<&[u32]> = Vec::new();
    let mut blocks = Vec::new();
    let mut cluster_block = Vec::with_capacity(layout.n_clusters());
    for k in 0..layout.n_clusters() {
        let row = layout.sizes_row(k);
        if let Some(b) = rows.iter().position(|r| *r == row) {
            cluster_block.push(b);
            continue;
        }
        let periods: Vec<usize> = (0..layout.n_periods()).filter(|&t| row[t] > 0).collect();
        if periods.is_empty() {
            return Err(Error::InvalidDimension(format!("cluster {k} has no observed cells")));
        }
        let sizes: Vec<u32> = periods.iter().map(|&t| row[t]).collect();
        let n = periods.len();
        let mut matrix = DMatrix::zeros(n, n);
        for a in 0..n {
            for c in 0..n {
                matrix[(a, c)] = tau2 * corr.period_correlation(periods[a], periods[c]);
            }
            matrix[(a, a)] += outcome.residual_variance(corr, periods[a]) / sizes[a] as f64;
        }
        if Cholesky::new(matrix.clone()).is_none() {
            return Err(Error::NotPositiveDefinite(format!("cluster {k} block with {corr:?}")));
        }
        let weights =
            periods.iter().zip(&sizes).map(|(&t, &m)| m as f64 / outcome.residual_variance(corr, t)).collect();
        let n_stage_one = periods.iter().filter(|&&t| layout.is_stage_one(t)).count();
        rows.push(row);
        cluster_block.push(blocks.len());
        blocks.push(ClusterBlock { periods, sizes, n_stage_one, matrix, weights });
    }
    Ok(WorkingCovariance { blocks, cluster_block })
}
