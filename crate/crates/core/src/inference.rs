//! Marginal and conditional score statistics for a stage-split layout.
//!
//! Projections are generalised least squares residuals of the treatment
//! indicator on period indicators, computed stage by stage. The conditional
//! stage 2 quantities use the Schur complement `S = Σ22 - Σ21 Σ11^-1 Σ12`
//! within each cluster, so nothing larger than a single cluster block is ever
//! factorised.

use crate::dist::{self, norm_upper};
use crate::error::{Error, Result};
use crate::model::{build_covariance, CorrelationModel, OutcomeModel, TrialLayout, WorkingCovariance};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

type Chol = Cholesky<f64, Dyn>;

/// Which cells a projection runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStatistics {
    pub u1: f64,
    pub u2c: f64,
    pub i1: f64,
    pub i2c: f64,
    pub z1: f64,
    pub z2c: f64,
    pub df1: f64,
    pub df2c: f64,
    pub df_total: f64,
}

/// Design-level information and between-within degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignInformation {
    pub i1: f64,
    pub i2c: f64,
    pub df1: f64,
    pub df2c: f64,
    pub df_total: f64,
}

/// Cholesky factors of one cluster block and its stage partition.
pub(crate) struct BlockFactors {
    pub n1: usize,
    pub n2: usize,
    pub chol11: Option<Chol>,
    pub chol22: Option<Chol>,
    /// `Σ21 Σ11^-1`, `n2 x n1`.
    pub b: DMatrix<f64>,
    /// Factor of the Schur complement (or of `Σ22` when there are no stage 1 cells).
    pub chol_s: Option<Chol>,
}

fn chol(m: DMatrix<f64>, what: &str) -> Result<Chol> {
    Cholesky::new(m).ok_or_else(|| Error::Singular(what.to_string()))
}

pub(crate) fn factor_blocks(cov: &WorkingCovariance) -> Result<Vec<BlockFactors>> {
    cov.unique_blocks()
        .iter()
        .map(|blk| {
            let n = blk.periods.len();
            let n1 = blk.n_stage_one;
            let n2 = n - n1;
            let chol11 = if n1 > 0 { Some(chol(blk.sigma11(), "stage 1 covariance block")?) } else { None };
            let chol22 = if n2 > 0 { Some(chol(blk.sigma22(), "stage 2 covariance block")?) } else { None };
            let (b, chol_s) = match (&chol11, n2) {
                (_, 0) => (DMatrix::zeros(0, n1), None),
                (None, _) => (DMatrix::zeros(n2, 0), chol22.clone()),
                (Some(c11), _) => {
                    let s12 = blk.sigma12();
                    let a = c11.solve(&s12); // Σ11^-1 Σ12
                    let s = blk.sigma22() - s12.transpose() * &a;
                    let s = 0.5 * (&s + s.transpose());
                    (a.transpose(), Some(chol(s, "conditional stage 2 covariance")?))
                }
            };
            Ok(BlockFactors { n1, n2, chol11, chol22, b, chol_s })
        })
        .collect()
}

/// Clusters sharing a covariance block and a treatment pattern.
pub(crate) struct Group {
    pub block: usize,
    pub mult: f64,
    /// Treatment indicator on the block's observed cells.
    pub x: DVector<f64>,
    pub clusters: Vec<usize>,
}

pub(crate) fn groups(layout: &TrialLayout, cov: &WorkingCovariance) -> Vec<Group> {
    let mut out: Vec<Group> = Vec::new();
    for k in 0..layout.n_clusters() {
        let b = cov.block_index(k);
        let periods = &cov.block(k).periods;
        let row = layout.treatment_row(k);
        let same = |g: &Group| g.block == b && periods.iter().zip(g.x.iter()).all(|(&t, &x)| (x == 1.0) == row[t]);
        match out.iter_mut().find(|g| same(g)) {
            Some(g) => {
                g.mult += 1.0;
                g.clusters.push(k);
            }
            None => {
                let x = DVector::from_iterator(periods.len(), periods.iter().map(|&t| if row[t] { 1.0 } else { 0.0 }));
                out.push(Group { block: b, mult: 1.0, x, clusters: vec![k] })
            }
        }
    }
    out
}

fn period_columns(periods: &[usize], n_periods: usize) -> Vec<Option<usize>> {
    let mut col = vec![None; n_periods];
    for (i, &p) in periods.iter().enumerate() {
        col[p] = Some(i);
    }
    col
}

fn indicator_matrix(periods: &[usize], col: &[Option<usize>], ncols: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(periods.len(), ncols);
    for (r, &p) in periods.iter().enumerate() {
        if let Some(c) = col[p] {
            x[(r, c)] = 1.0;
        }
    }
    x
}

/// GLS residuals of `x` on period indicators, one vector per part.
fn gls_residuals(
    parts: &[(f64, &Chol, &[usize], DVector<f64>)],
    col: &[Option<usize>],
    ncols: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut m = DMatrix::zeros(ncols, ncols);
    let mut rhs = DVector::zeros(ncols);
    let designs: Vec<DMatrix<f64>> = parts.iter().map(|(_, _, p, _)| indicator_matrix(p, col, ncols)).collect();
    for ((mult, c, _, x), xm) in parts.iter().zip(&designs) {
        let vix = c.solve(xm);
        m += *mult * xm.transpose() * &vix;
        rhs += *mult * vix.transpose() * x;
    }
    let mc = Cholesky::new(m)
        .ok_or_else(|| Error::RankDeficient("nuisance design matrix is not of full column rank".into()))?;
    let a = mc.solve(&rhs);
    Ok(parts.iter().zip(&designs).map(|((_, _, _, x), xm)| x - xm * &a).collect())
}

/// Stage-wise projected treatment vectors for every group: `(x̃1, x̃2)`.
pub(crate) fn stagewise_projections(
    layout: &TrialLayout,
    cov: &WorkingCovariance,
    factors: &[BlockFactors],
    groups: &[Group],
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let np = layout.n_periods();
    let mut out: Vec<(DVector<f64>, DVector<f64>)> = groups
        .iter()
        .map(|g| {
            let f = &factors[g.block];
            (DVector::zeros(f.n1), DVector::zeros(f.n2))
        })
        .collect();
    for stage in [1u8, 2] {
        let periods = layout.observed_periods(Some(stage));
        if periods.is_empty() {
            continue;
        }
        let col = period_columns(&periods, np);
        let mut idx = Vec::new();
        let mut parts = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            let f = &factors[g.block];
            let blk = &cov.unique_blocks()[g.block];
            let (c, range) = if stage == 1 { (&f.chol11, 0..f.n1) } else { (&f.chol22, f.n1..f.n1 + f.n2) };
            if let Some(c) = c {
                let x = g.x.rows(range.start, range.len()).into_owned();
                parts.push((g.mult, c, &blk.periods[range], x));
                idx.push(gi);
            }
        }
        let res = gls_residuals(&parts, &col, periods.len())?;
        for (gi, r) in idx.into_iter().zip(res) {
            if stage == 1 {
                out[gi].0 = r;
            } else {
                out[gi].1 = r;
            }
        }
    }
    Ok(out)
}

/// `x̃2|1 = x̃2 - B x̃1` per group.
pub(crate) fn conditional_projection(f: &BlockFactors, xt1: &DVector<f64>, xt2: &DVector<f64>) -> DVector<f64> {
    if f.n1 == 0 {
        xt2.clone()
    } else {
        xt2 - &f.b * xt1
    }
}

fn quad(c: &Chol, v: &DVector<f64>) -> f64 {
    v.dot(&c.solve(v))
}

fn bilinear(c: &Chol, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(&c.solve(b))
}

fn between_within_df(layout: &TrialLayout, stage: Option<u8>) -> f64 {
    let periods = layout.observed_periods(stage).len();
    layout.n_cells(stage) as f64 - (periods as f64 + 1.0)
}

pub fn design_information(layout: &TrialLayout, cov: &WorkingCovariance) -> Result<DesignInformation> {
    let factors = factor_blocks(cov)?;
    let groups = groups(layout, cov);
    let proj = stagewise_projections(layout, cov, &factors, &groups)?;
    let mut i1 = 0.0;
    let mut i2c = 0.0;
    for (g, (xt1, xt2)) in groups.iter().zip(&proj) {
        let f = &factors[g.block];
        if let Some(c) = &f.chol11 {
            i1 += g.mult * quad(c, xt1);
        }
        if let Some(cs) = &f.chol_s {
            i2c += g.mult * quad(cs, &conditional_projection(f, xt1, xt2));
        }
    }
    Ok(DesignInformation {
        i1,
        i2c: i2c.max(0.0),
        df1: between_within_df(layout, Some(1)),
        df2c: if layout.has_stage_two() { between_within_df(layout, Some(2)) } else { 0.0 },
        df_total: between_within_df(layout, None),
    })
}

/// Convenience: build the covariance and return the design information.
pub fn information_for(
    layout: &TrialLayout,
    corr: &CorrelationModel,
    outcome: &OutcomeModel,
) -> Result<DesignInformation> {
    design_information(layout, &build_covariance(layout, corr, outcome)?)
}

/// Projected treatment vector. Stage 1 and 2 results follow the order of
/// `layout.stage_cells(s)`; the full projection follows `layout.cells()`.
pub fn project_treatment(layout: &TrialLayout, cov: &WorkingCovariance, stage: Stage) -> Result<Vec<f64>> {
    let groups = groups(layout, cov);
    let mut group_of = vec![0usize; layout.n_clusters()];
    for (gi, g) in groups.iter().enumerate() {
        for &k in &g.clusters {
            group_of[k] = gi;
        }
    }
    let per_group: Vec<DVector<f64>> = match stage {
        Stage::Full => {
            let periods = layout.observed_periods(None);
            let col = period_columns(&periods, layout.n_periods());
            let chols: Vec<Chol> = cov
                .unique_blocks()
                .iter()
                .map(|b| chol(b.matrix.clone(), "cluster covariance block"))
                .collect::<Result<_>>()?;
            let parts: Vec<_> = groups
                .iter()
                .map(|g| (g.mult, &chols[g.block], cov.unique_blocks()[g.block].periods.as_slice(), g.x.clone()))
                .collect();
            gls_residuals(&parts, &col, periods.len())?
        }
        _ => {
            let factors = factor_blocks(cov)?;
            let proj = stagewise_projections(layout, cov, &factors, &groups)?;
            proj.into_iter().map(|(a, b)| if stage == Stage::One { a } else { b }).collect()
        }
    };
    let mut out = Vec::new();
    for k in 0..layout.n_clusters() {
        let v = &per_group[group_of[k]];
        let blk = cov.block(k);
        let range = match stage {
            Stage::One => 0..blk.n_stage_one,
            Stage::Two => 0..v.len(),
            Stage::Full => 0..v.len(),
        };
        out.extend(v.rows(range.start, range.len()).iter());
    }
    Ok(out)
}

/// Information of the full-trial GLS projection, `x̃ᵀ Σ^-1 x̃`.
pub fn full_information(layout: &TrialLayout, cov: &WorkingCovariance) -> Result<f64> {
    let xt = project_treatment(layout, cov, Stage::Full)?;
    let mut pos = 0;
    let mut total = 0.0;
    for k in 0..layout.n_clusters() {
        let blk = cov.block(k);
        let n = blk.periods.len();
        let v = DVector::from_column_slice(&xt[pos..pos + n]);
        total += quad(&chol(blk.matrix.clone(), "cluster covariance block")?, &v);
        pos += n;
    }
    Ok(total)
}

/// Score and information decomposition for residuals aligned with `layout.cells()`.
pub fn decompose(layout: &TrialLayout, cov: &WorkingCovariance, residuals: &[f64]) -> Result<StageStatistics> {
    let n_cells = layout.cells().len();
    if residuals.len() != n_cells {
        return Err(Error::LengthMismatch(residuals.len(), n_cells));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("residuals".into()));
    }
    let factors = factor_blocks(cov)?;
    let groups = groups(layout, cov);
    let proj = stagewise_projections(layout, cov, &factors, &groups)?;
    let info = design_information(layout, cov)?;
    let mut group_of = vec![0usize; layout.n_clusters()];
    for (gi, g) in groups.iter().enumerate() {
        for &k in &g.clusters {
            group_of[k] = gi;
        }
    }
    let (mut u1, mut u2c) = (0.0, 0.0);
    let mut pos = 0;
    for k in 0..layout.n_clusters() {
        let g = &groups[group_of[k]];
        let f = &factors[g.block];
        let (xt1, xt2) = &proj[group_of[k]];
        let r1 = DVector::from_column_slice(&residuals[pos..pos + f.n1]);
        let r2 = DVector::from_column_slice(&residuals[pos + f.n1..pos + f.n1 + f.n2]);
        pos += f.n1 + f.n2;
        if let Some(c) = &f.chol11 {
            u1 += bilinear(c, xt1, &r1);
        }
        if let Some(cs) = &f.chol_s {
            let r21 = if f.n1 == 0 { r2 } else { &r2 - &f.b * &r1 };
            u2c += bilinear(cs, &conditional_projection(f, xt1, xt2), &r21);
        }
    }
    if info.i1 <= 0.0 {
        return Err(Error::ZeroStageOneInformation);
    }
    Ok(StageStatistics {
        u1,
        u2c,
        i1: info.i1,
        i2c: info.i2c,
        z1: u1 / info.i1.sqrt(),
        z2c: if info.i2c > 0.0 { u2c / info.i2c.sqrt() } else { 0.0 },
        df1: info.df1,
        df2c: info.df2c,
        df_total: info.df_total,
    })
}

/// Map a t statistic onto the z scale, `Φ^-1(F_df(t))`.
pub fn t_to_z(t: f64, df: f64) -> Result<f64> {
    if !t.is_finite() || df.is_nan() {
        return Err(Error::NonFinite(format!("t_to_z({t}, {df})")));
    }
    if df < 1.0 {
        return Err(Error::InvalidParameter(format!("degrees of freedom {df} < 1")));
    }
    Ok(dist::t_to_z_raw(t, df))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sides {
    Two,
    One,
}

/// Critical value `z_{α/2}` (two-sided) or `z_α` (one-sided).
pub fn critical_value(alpha: f64, sides: Sides) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(match sides {
        Sides::Two => norm_upper(alpha / 2.0),
        Sides::One => norm_upper(alpha),
    })
}

/// Combination weights fixed at the design stage, and the efficacy boundary they imply.
///
/// There are no setters: once built, the weights cannot change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights {
    w1: f64,
    w2: f64,
    critical: f64,
    i1_plan: f64,
    i2c_plan: f64,
}

impl CombinationWeights {
    /// Weights from planning information values.
    pub fn from_information(i1: f64, i2c: f64, critical: f64) -> Result<Self> {
        if !(i1 > 0.0) || !i1.is_finite() {
            return Err(Error::ZeroStageOneInformation);
        }
        if !(i2c >= 0.0) || !i2c.is_finite() {
            return Err(Error::NonFinite(format!("stage 2 information {i2c}")));
        }
        let w1 = (i1 / (i1 + i2c)).sqrt();
        let w2 = (i2c / (i1 + i2c)).sqrt();
        Ok(Self { w1, w2, critical, i1_plan: i1, i2c_plan: i2c })
    }

    /// Single-stage weights, `w1 = 1`.
    pub fn single_stage(critical: f64) -> Self {
        Self { w1: 1.0, w2: 0.0, critical, i1_plan: f64::NAN, i2c_plan: 0.0 }
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }

    pub fn critical(&self) -> f64 {
        self.critical
    }

    /// Efficacy boundary `c = z_crit / w1`.
    pub fn boundary(&self) -> f64 {
        self.critical / self.w1
    }

    pub fn planning_information(&self) -> (f64, f64) {
        (self.i1_plan, self.i2c_plan)
    }
}

/// Planning weights from a reference two-stage layout under `θ_plan`. The
/// reference's stage 1 part is the stage 1 design; a reference without stage 2
/// cells gives `w1 = 1`.
pub fn planning_weights(
    reference: &TrialLayout,
    corr: &CorrelationModel,
    outcome: &OutcomeModel,
    alpha: f64,
    sides: Sides,
) -> Result<CombinationWeights> {
    let info = information_for(reference, corr, outcome)?;
    CombinationWeights::from_information(info.i1, info.i2c, critical_value(alpha, sides)?)
}

pub fn combination_statistic(z1: f64, z2c: f64, weights: &CombinationWeights) -> f64 {
    weights.w1 * z1 + weights.w2 * z2c
}

/// Result of one stage's test on observed data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTest {
    pub score: f64,
    pub information: f64,
    /// Statistic on the z scale (after the t mapping when small-sample correction is on).
    pub z: f64,
    pub t: Option<f64>,
    pub df: f64,
    pub scale: f64,
}

/// Whitened least-squares machinery for one stage: the orthonormal basis of the
/// whitened nuisance columns and the whitened treatment residual.
#[derive(Debug, Clone)]
struct WhitenedFit {
    q: DMatrix<f64>,
    xt: DVector<f64>,
    rank: usize,
}

impl WhitenedFit {
    fn new(a: DMatrix<f64>, x: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        let (q, rank) = if a.ncols() == 0 || n == 0 {
            (DMatrix::zeros(n, 0), 0)
        } else {
            let svd = a.svd(true, false);
            let u = svd.u.ok_or_else(|| Error::Singular("svd failed".into()))?;
            let smax = svd.singular_values.max();
            let tol = smax * 1e-10 * n.max(1) as f64;
            let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol).collect();
            (u.select_columns(&keep), keep.len())
        };
        let xt = &x - &q * (q.transpose() * &x);
        Ok(Self { q, xt, rank })
    }

    fn residual(&self, y: &DVector<f64>) -> DVector<f64> {
        y - &self.q * (self.q.transpose() * y)
    }
}

/// Everything needed to analyse data from one layout under a fixed working
/// covariance, prepared once and reused across data sets.
pub struct AnalysisModel {
    layout: TrialLayout,
    cluster_block: Vec<usize>,
    factors: Vec<BlockFactors>,
    /// Lower factors for whitening: stage 1 (`Σ11`) and conditional stage 2 (`S`).
    l1: Vec<Option<DMatrix<f64>>>,
    l2: Vec<Option<DMatrix<f64>>>,
    fit1: WhitenedFit,
    fit2: Option<WhitenedFit>,
    info: DesignInformation,
}

impl AnalysisModel {
    pub fn new(layout: &TrialLayout, cov: &WorkingCovariance) -> Result<Self> {
        let factors = factor_blocks(cov)?;
        let info = design_information(layout, cov)?;
        if info.i1 <= 0.0 {
            return Err(Error::ZeroStageOneInformation);
        }
        let l1: Vec<Option<DMatrix<f64>>> = factors.iter().map(|f| f.chol11.as_ref().map(|c| c.l())).collect();
        let l2: Vec<Option<DMatrix<f64>>> = factors.iter().map(|f| f.chol_s.as_ref().map(|c| c.l())).collect();
        let np = layout.n_periods();
        let p1 = layout.observed_periods(Some(1));
        let p2 = layout.observed_periods(Some(2));
        let col1 = period_columns(&p1, np);
        let col2 = period_columns(&p2, np);
        let cluster_block: Vec<usize> = (0..layout.n_clusters()).map(|k| cov.block_index(k)).collect();

        let mut a1_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut x1_rows: Vec<DVector<f64>> = Vec::new();
        let mut a2_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut x2_rows: Vec<DVector<f64>> = Vec::new();
        for (k, &b) in cluster_block.iter().enumerate() {
            let f = &factors[b];
            let blk = cov.block(k);
            let x: DVector<f64> = DVector::from_iterator(
                blk.periods.len(),
                blk.periods.iter().map(|&t| if layout.treated(k, t) { 1.0 } else { 0.0 }),
            );
            let per1 = &blk.periods[..f.n1];
            let per2 = &blk.periods[f.n1..];
            let xm1 = indicator_matrix(per1, &col1, p1.len());
            let x1 = x.rows(0, f.n1).into_owned();
            if let Some(l) = &l1[b] {
                a1_rows.push(solve_lower(l, &xm1));
                x1_rows.push(solve_lower_vec(l, &x1));
            }
            if let Some(l) = &l2[b] {
                let xm2 = indicator_matrix(per2, &col2, p2.len());
                let x2 = x.rows(f.n1, f.n2).into_owned();
                let bx1 = &f.b * &xm1;
                let mut m = DMatrix::zeros(f.n2, p2.len() + p1.len());
                m.view_mut((0, 0), (f.n2, p2.len())).copy_from(&xm2);
                if f.n1 > 0 {
                    m.view_mut((0, p2.len()), (f.n2, p1.len())).copy_from(&bx1);
                }
                let d = if f.n1 > 0 { &x2 - &f.b * &x1 } else { x2 };
                a2_rows.push(solve_lower(l, &m));
                x2_rows.push(solve_lower_vec(l, &d));
            }
        }
        let fit1 = WhitenedFit::new(vstack(&a1_rows, p1.len()), vcat(&x1_rows))?;
        let fit2 = if a2_rows.is_empty() {
            None
        } else {
            Some(WhitenedFit::new(vstack(&a2_rows, p1.len() + p2.len()), vcat(&x2_rows))?)
        };
        Ok(Self { layout: layout.clone(), cluster_block, factors, l1, l2, fit1, fit2, info })
    }

    pub fn information(&self) -> &DesignInformation {
        &self.info
    }

    pub fn layout(&self) -> &TrialLayout {
        &self.layout
    }

    fn whitened(&self, y: &[f64], stage: u8) -> Result<DVector<f64>> {
        let expected = self.layout.cells().len();
        let stage1_only = self.layout.stage_cells(1).len();
        if y.len() != expected && !(stage == 1 && y.len() == stage1_only) {
            return Err(Error::LengthMismatch(y.len(), expected));
        }
        let full = y.len() == expected;
        let mut parts = Vec::new();
        let mut pos = 0;
        for &b in &self.cluster_block {
            let f = &self.factors[b];
            let n_here = if full { f.n1 + f.n2 } else { f.n1 };
            let y1 = DVector::from_column_slice(&y[pos..pos + f.n1]);
            if stage == 1 {
                if let Some(l) = &self.l1[b] {
                    parts.push(solve_lower_vec(l, &y1));
                }
            } else if let Some(l) = &self.l2[b] {
                let y2 = DVector::from_column_slice(&y[pos + f.n1..pos + f.n1 + f.n2]);
                let e = if f.n1 > 0 { y2 - &f.b * y1 } else { y2 };
                parts.push(solve_lower_vec(l, &e));
            }
            pos += n_here;
        }
        let v = vcat(&parts);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("outcome data".into()));
        }
        Ok(v)
    }

    // Standardised by the information of the fitted projection. For stage 1, and
    // for stage 2 whenever the conditional nuisance columns lie in the stage 2
    // span, this equals the design information.
    fn test(fit: &WhitenedFit, yw: &DVector<f64>, small_sample: bool) -> Result<StageTest> {
        let r = fit.residual(yw);
        let score = fit.xt.dot(&r);
        let info = fit.xt.norm_squared();
        if !(info > 0.0) {
            return Err(Error::ZeroStageTwoWeight);
        }
        let z = score / info.sqrt();
        if !small_sample {
            return Ok(StageTest { score, information: info, z, t: None, df: f64::INFINITY, scale: 1.0 });
        }
        let rank = fit.rank + 1;
        let df = yw.len() as f64 - rank as f64;
        if df < 1.0 {
            return Err(Error::InvalidDimension(format!("no residual degrees of freedom ({df})")));
        }
        let rss = (r.norm_squared() - score * score / info).max(0.0);
        let scale = (rss / df).sqrt();
        if !(scale > 0.0) {
            return Err(Error::NonFinite("residual scale is zero".into()));
        }
        let t = z / scale;
        Ok(StageTest { score, information: info, z: t_to_z(t, df)?, t: Some(t), df, scale })
    }

    /// Stage 1 marginal test. `y` holds cell outcomes in `layout.cells()` order,
    /// or only the stage 1 cells in `layout.stage_cells(1)` order.
    pub fn stage_one(&self, y: &[f64], small_sample: bool) -> Result<StageTest> {
        let yw = self.whitened(y, 1)?;
        Self::test(&self.fit1, &yw, small_sample)
    }

    /// Conditional stage 2 test, standardised by the design's `i2c`.
    pub fn stage_two(&self, y: &[f64], small_sample: bool) -> Result<StageTest> {
        let fit = self.fit2.as_ref().ok_or(Error::ZeroStageTwoWeight)?;
        if self.info.i2c <= 0.0 {
            return Err(Error::ZeroStageTwoWeight);
        }
        let yw = self.whitened(y, 2)?;
        Self::test(fit, &yw, small_sample)
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("cholesky factor has a positive diagonal")
}

fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("cholesky factor has a positive diagonal")
}

fn vstack(rows: &[DMatrix<f64>], ncols: usize) -> DMatrix<f64> {
    let n: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut out = DMatrix::zeros(n, ncols);
    let mut pos = 0;
    for r in rows {
        out.view_mut((pos, 0), (r.nrows(), ncols)).copy_from(r);
        pos += r.nrows();
    }
    out
}

fn vcat(parts: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_layout, LayoutKind, Stage2Params, StageOneDesign};

    fn exch(icc: f64) -> CorrelationModel {
        CorrelationModel::exchangeable(icc, 1.0).unwrap()
    }

    #[test]
    fn parallel_projection_is_centred_indicator() {
        let l = build_layout(LayoutKind::Parallel, 3, 1, 10).unwrap();
        let cov = build_covariance(&l, &exch(0.05), &OutcomeModel::gaussian()).unwrap();
        let xt = project_treatment(&l, &cov, Stage::One).unwrap();
        for (k, v) in xt.iter().enumerate() {
            let expect = if k < 3 { 0.5 } else { -0.5 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn new_clusters_only_gives_marginal_stage_two() {
        // stage 2 consists solely of new clusters: Σ12 = 0
        let layout = TrialLayout::new(
            4,
            2,
            vec![10, 0, 10, 0, 0, 20, 0, 20],
            vec![true, true, false, false, true, true, false, false],
            1,
        )
        .unwrap();
        let cov = build_covariance(&layout, &exch(0.1), &OutcomeModel::gaussian()).unwrap();
        let info = design_information(&layout, &cov).unwrap();
        let v2 = 0.1 + 0.9 / 20.0;
        assert!((info.i2c - 2.0 * 0.25 / v2).abs() < 1e-12);
        let r = [0.3, -0.2, 0.7, 0.1];
        let s = decompose(&layout, &cov, &r).unwrap();
        // marginal stage 2 score with centred indicator
        assert!((s.u2c - (0.5 * 0.7 - 0.5 * 0.1) / v2).abs() < 1e-12);
    }

    #[test]
    fn t_to_z_reference_values() {
        assert_eq!(t_to_z(0.0, 5.0).unwrap(), 0.0);
        assert!((t_to_z(2.0, 10.0).unwrap() - 1.790_409_932_268_829).abs() < 1e-9);
        for i in 0..=60 {
            let x = -3.0 + 0.1 * i as f64;
            assert!((t_to_z(x, 1e6).unwrap() - x).abs() < 1e-3);
        }
        assert!(t_to_z(f64::NAN, 3.0).is_err());
        assert!(t_to_z(1.0, 0.5).is_err());
    }

    #[test]
    fn weights_single_stage_and_symmetric() {
        let d = StageOneDesign::Parallel { k1: 4, m1: 10, t1: 1, baseline: None };
        let l = d.stage_one_layout().unwrap();
        let w = planning_weights(&l, &exch(0.05), &OutcomeModel::gaussian(), 0.05, Sides::Two).unwrap();
        assert_eq!(w.w1(), 1.0);
        assert!((w.boundary() - 1.959_963_984_540_054).abs() < 1e-12);
        // icc = 0: two identical independent stages
        let l2 = d.combined_layout(&Stage2Params { k2: 0, m2: 10, t2: 1, r: 1.0 }).unwrap();
        let w = planning_weights(&l2, &exch(0.0), &OutcomeModel::gaussian(), 0.05, Sides::Two).unwrap();
        assert!((w.w1() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((w.w1().powi(2) + w.w2().powi(2) - 1.0).abs() < 1e-12);
        assert_eq!(combination_statistic(0.0, 0.0, &w), 0.0);
        assert_eq!(combination_statistic(1.3, -4.0, &CombinationWeights::single_stage(1.96)), 1.3);
    }

    #[test]
    fn analysis_stage_one_matches_decomposition() {
        let d = StageOneDesign::Parallel { k1: 3, m1: 10, t1: 2, baseline: None };
        let l = d.combined_layout(&Stage2Params { k2: 1, m2: 15, t2: 1, r: 1.0 }).unwrap();
        let corr = CorrelationModel::nested_exchangeable(0.05, 0.8, 1.0).unwrap();
        let cov = build_covariance(&l, &corr, &OutcomeModel::gaussian()).unwrap();
        let n = l.cells().len();
        let y: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let s = decompose(&l, &cov, &y).unwrap();
        let a = AnalysisModel::new(&l, &cov).unwrap();
        let t1 = a.stage_one(&y, false).unwrap();
        assert!((t1.score - s.u1).abs() < 1e-10);
        let t2 = a.stage_two(&y, false).unwrap();
        assert!((t2.score - s.u2c).abs() < 1e-10);
        assert!(a.stage_one(&y, true).unwrap().df > 0.0);
    }
}
