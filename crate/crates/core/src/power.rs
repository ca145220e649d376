//! Conditional power and total power of a two-stage procedure.

use crate::dist::{chi_scale_rule, norm_cdf, norm_pdf, t_cdf, t_pdf, t_sf, z_to_t, NORMAL_DF_LIMIT};
use crate::error::{Error, Result};
use crate::inference::{CombinationWeights, Sides};
use crate::par;
use crate::quad::adaptive_simpson;
use serde::{Deserialize, Serialize};

/// Distribution of stage-wise t statistics under an alternative, used when the
/// small-sample correction is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SmallSampleModel {
    /// Central t shifted by the noncentrality, the usual power-formula approximation.
    #[default]
    Shifted,
    /// Noncentral t. Matches the sampling distribution of the analysis exactly
    /// when the working covariance is correct.
    Noncentral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSettings {
    pub alpha: f64,
    #[serde(default = "two_sided")]
    pub sides: Sides,
    #[serde(default)]
    pub small_sample: bool,
    #[serde(default)]
    pub small_sample_model: SmallSampleModel,
}

fn two_sided() -> Sides {
    Sides::Two
}

impl Default for TestSettings {
    fn default() -> Self {
        Self { alpha: 0.05, sides: Sides::Two, small_sample: false, small_sample_model: SmallSampleModel::Shifted }
    }
}

/// Target effect, test settings, frozen weights and stage 1 information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerQuery {
    delta: f64,
    settings: TestSettings,
    weights: CombinationWeights,
    i1: f64,
    df1: f64,
}

/// Stage 2 rejection thresholds for one `z1`, on the scale of the stage 2 test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTwoBounds {
    upper: f64,
    lower: f64,
}

impl PowerQuery {
    pub fn new(delta: f64, settings: TestSettings, weights: CombinationWeights, i1: f64, df1: f64) -> Result<Self> {
        if !delta.is_finite() {
            return Err(Error::NonFinite("delta".into()));
        }
        if !(settings.alpha > 0.0 && settings.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {}", settings.alpha)));
        }
        if !(i1 > 0.0) || !i1.is_finite() {
            return Err(Error::ZeroStageOneInformation);
        }
        if settings.small_sample && !(df1 >= 1.0) {
            return Err(Error::InvalidDimension(format!("stage 1 has {df1} degrees of freedom")));
        }
        Ok(Self { delta, settings, weights, i1, df1 })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn settings(&self) -> &TestSettings {
        &self.settings
    }

    pub fn weights(&self) -> &CombinationWeights {
        &self.weights
    }

    pub fn i1(&self) -> f64 {
        self.i1
    }

    pub fn df1(&self) -> f64 {
        self.df1
    }

    /// Stage 1 noncentrality `δ √I1`.
    pub fn mu1(&self) -> f64 {
        self.delta * self.i1.sqrt()
    }

    pub fn boundary(&self) -> f64 {
        self.weights.boundary()
    }

    /// Copy with other truth values for the effect and stage 1 information.
    pub fn with_truth(&self, delta: f64, i1: f64) -> Result<Self> {
        Self::new(delta, self.settings, self.weights, i1, self.df1)
    }

    fn direction(&self) -> f64 {
        if self.delta < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    fn stage_one_df(&self) -> f64 {
        if self.settings.small_sample {
            self.df1
        } else {
            f64::INFINITY
        }
    }

    /// The t model in force, or `None` when statistics are treated as normal.
    pub fn t_model(&self) -> Option<SmallSampleModel> {
        self.stage_one_df().is_finite().then_some(self.settings.small_sample_model)
    }

    pub fn stage_one_pdf(&self, z: f64) -> f64 {
        let mu = self.mu1();
        let df = self.stage_one_df();
        match self.t_model() {
            None => norm_pdf(z - mu),
            Some(model) => {
                let q = z_to_t(z, df);
                let f = match model {
                    SmallSampleModel::Shifted => t_pdf(q - mu, df),
                    SmallSampleModel::Noncentral => chi_scale_rule(df).nct_pdf(q, mu),
                };
                f * norm_pdf(z) / t_pdf(q, df)
            }
        }
    }

    pub fn stage_one_cdf(&self, z: f64) -> f64 {
        let mu = self.mu1();
        let df = self.stage_one_df();
        if z.is_infinite() {
            return if z > 0.0 { 1.0 } else { 0.0 };
        }
        match self.t_model() {
            None => norm_cdf(z - mu),
            Some(SmallSampleModel::Shifted) => t_cdf(z_to_t(z, df) - mu, df),
            Some(SmallSampleModel::Noncentral) => chi_scale_rule(df).nct_cdf(z_to_t(z, df), mu),
        }
    }

    /// Probability that `z1` lies in `[lo, hi]`.
    pub fn stage_one_mass(&self, lo: f64, hi: f64) -> f64 {
        (self.stage_one_cdf(hi) - self.stage_one_cdf(lo)).max(0.0)
    }

    /// Probability of stopping for efficacy at the interim.
    pub fn efficacy_probability(&self) -> f64 {
        let c = self.boundary();
        match self.settings.sides {
            Sides::Two => (1.0 - self.stage_one_cdf(c)) + self.stage_one_cdf(-c),
            Sides::One if self.direction() > 0.0 => 1.0 - self.stage_one_cdf(c),
            Sides::One => self.stage_one_cdf(-c),
        }
    }

    /// Thresholds the stage 2 statistic must cross, given `z1`.
    pub fn stage_two_bounds(&self, z1: f64, df2c: f64) -> StageTwoBounds {
        let w1 = self.weights.w1();
        let w2 = self.weights.w2();
        let za = self.weights.critical();
        let bu = (za - w1 * z1) / w2;
        let bl = (-za - w1 * z1) / w2;
        if self.settings.small_sample {
            StageTwoBounds { upper: z_to_t(bu, df2c), lower: z_to_t(bl, df2c) }
        } else {
            StageTwoBounds { upper: bu, lower: bl }
        }
    }

    /// Conditional power from precomputed bounds.
    pub fn conditional_power_with(&self, b: &StageTwoBounds, i2c: f64, df2c: f64) -> f64 {
        let mu2 = self.delta * i2c.sqrt();
        let (up, low) = if !self.settings.small_sample || df2c > NORMAL_DF_LIMIT {
            (norm_cdf(mu2 - b.upper), norm_cdf(b.lower - mu2))
        } else {
            match self.settings.small_sample_model {
                SmallSampleModel::Shifted => (t_sf(b.upper - mu2, df2c), t_cdf(b.lower - mu2, df2c)),
                SmallSampleModel::Noncentral => {
                    let r = chi_scale_rule(df2c);
                    (r.nct_sf(b.upper, mu2), r.nct_cdf(b.lower, mu2))
                }
            }
        };
        match self.settings.sides {
            Sides::Two => up + low,
            Sides::One if self.direction() > 0.0 => up,
            Sides::One => low,
        }
    }

    fn check_stage_two(&self, i2c: f64, df2c: f64) -> Result<bool> {
        if !(i2c >= 0.0) || !i2c.is_finite() {
            return Err(Error::InvalidParameter(format!("stage 2 information {i2c}")));
        }
        if self.weights.w2() == 0.0 {
            if i2c > 0.0 {
                return Err(Error::ZeroStageTwoWeight);
            }
            return Ok(false);
        }
        if self.settings.small_sample && !(df2c >= 1.0) {
            return Err(Error::InvalidDimension(format!("stage 2 has {df2c} degrees of freedom")));
        }
        Ok(true)
    }

    /// Conditional power of a stage 2 design with conditional information `i2c`
    /// and `df2c` degrees of freedom (ignored without the small-sample option).
    pub fn conditional_power(&self, z1: f64, i2c: f64, df2c: f64) -> Result<f64> {
        if !z1.is_finite() {
            return Err(Error::NonFinite("z1".into()));
        }
        if !self.check_stage_two(i2c, df2c)? {
            return Ok(0.0);
        }
        let b = self.stage_two_bounds(z1, df2c);
        Ok(self.conditional_power_with(&b, i2c, df2c))
    }

    /// `∫ CP(z; i2c) f(z) dz` over `[lo, hi]` to absolute tolerance `tol`.
    pub fn cell_integral(&self, lo: f64, hi: f64, i2c: f64, df2c: f64, tol: f64) -> Result<f64> {
        if !self.check_stage_two(i2c, df2c)? {
            return Ok(0.0);
        }
        adaptive_simpson(
            |z| {
                let b = self.stage_two_bounds(z, df2c);
                self.conditional_power_with(&b, i2c, df2c) * self.stage_one_pdf(z)
            },
            lo,
            hi,
            tol,
        )
    }
}

/// One interval of a piecewise-constant continuation rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCell {
    pub lo: f64,
    pub hi: f64,
    /// `(i2c, df2c)` of the chosen stage 2 design, or `None` for a futility stop.
    pub stage_two: Option<(f64, f64)>,
}

/// Absolute quadrature tolerance for a whole rule.
pub const TOTAL_POWER_TOL: f64 = 1e-6;

/// Total power of a piecewise-constant rule: efficacy at the interim plus the
/// integrated conditional power over the continuation cells. Futility cells
/// contribute nothing.
pub fn total_power(query: &PowerQuery, cells: &[StepCell]) -> Result<f64> {
    let tol = TOTAL_POWER_TOL / cells.len().max(1) as f64;
    let parts = par::map(cells, |c| match c.stage_two {
        Some((i2c, df2c)) => query.cell_integral(c.lo, c.hi, i2c, df2c, tol),
        None => Ok(0.0),
    });
    let mut total = query.efficacy_probability();
    for p in parts {
        total += p?;
    }
    Ok(total)
}

/// Power of the stage 1 design analysed on its own at level `alpha`.
pub fn stage_one_power(delta: f64, i1: f64, df1: f64, settings: &TestSettings) -> Result<f64> {
    let crit = crate::inference::critical_value(settings.alpha, settings.sides)?;
    let q = PowerQuery::new(delta, *settings, CombinationWeights::single_stage(crit), i1, df1)?;
    Ok(q.efficacy_probability())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::critical_value;

    fn query(delta: f64, w1: f64, small: bool) -> PowerQuery {
        let crit = critical_value(0.05, Sides::Two).unwrap();
        let i1 = 40.0;
        let w = CombinationWeights::from_information(i1, i1 * (1.0 / (w1 * w1) - 1.0), crit).unwrap();
        let s = TestSettings { small_sample: small, ..TestSettings::default() };
        PowerQuery::new(delta, s, w, i1, 30.0).unwrap()
    }

    #[test]
    fn null_symmetric_case() {
        let q = query(0.0, 0.8, false);
        let w2 = q.weights().w2();
        let cp = q.conditional_power(0.0, 25.0, 20.0).unwrap();
        assert!((cp - 2.0 * norm_cdf(-q.weights().critical() / w2)).abs() < 1e-14);
    }

    #[test]
    fn large_information_gives_certainty() {
        let q = query(0.3, 0.8, false);
        assert!(q.conditional_power(-1.0, 1e6, 10.0).unwrap() > 1.0 - 1e-12);
        let q = query(0.3, 0.8, true);
        assert!(q.conditional_power(-1.0, 1e6, 10.0).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn zero_weight_with_information_is_an_error() {
        let crit = critical_value(0.05, Sides::Two).unwrap();
        let q =
            PowerQuery::new(0.2, TestSettings::default(), CombinationWeights::single_stage(crit), 10.0, 5.0).unwrap();
        assert!(matches!(q.conditional_power(0.0, 3.0, 5.0), Err(Error::ZeroStageTwoWeight)));
        assert_eq!(q.conditional_power(0.0, 0.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn null_rejection_with_early_efficacy_stop() {
        let q = query(0.0, 0.7, false);
        let c = q.boundary();
        let cp0 = |z: f64| q.conditional_power(z, 0.0, 10.0).unwrap() * norm_pdf(z);
        // the combination statistic alone is exactly calibrated
        let whole = adaptive_simpson(cp0, -12.0, 12.0, 1e-12).unwrap();
        assert!((whole - 0.05).abs() < 1e-10);
        // stopping beyond c rejects with probability 1 instead of CP0 there
        let n = 40;
        let cells: Vec<StepCell> = (0..n)
            .map(|i| {
                let lo = -c + 2.0 * c * i as f64 / n as f64;
                let hi = -c + 2.0 * c * (i + 1) as f64 / n as f64;
                StepCell { lo, hi, stage_two: Some((5.0 + i as f64, 10.0)) }
            })
            .collect();
        let p = total_power(&q, &cells).unwrap();
        let tails = adaptive_simpson(cp0, c, 12.0, 1e-12).unwrap() * 2.0;
        let expected = 0.05 + q.efficacy_probability() - tails;
        assert!((p - expected).abs() < 1e-6, "{p} vs {expected}");
        assert!(p > 0.05);
    }

    #[test]
    fn t_densities_match_their_distribution_functions() {
        for model in [SmallSampleModel::Noncentral, SmallSampleModel::Shifted] {
            let mut q = query(0.25, 0.8, true);
            q.settings.small_sample_model = model;
            assert_eq!(q.t_model(), Some(model));
            let mass = adaptive_simpson(|z| q.stage_one_pdf(z), -8.0, 10.0, 1e-9).unwrap();
            assert!((mass - (q.stage_one_cdf(10.0) - q.stage_one_cdf(-8.0))).abs() < 1e-7, "{model:?}");
        }
    }

    #[test]
    fn alpha_one_always_rejects() {
        let s = TestSettings { alpha: 1.0, ..TestSettings::default() };
        assert!((stage_one_power(0.1, 4.0, 10.0, &s).unwrap() - 1.0).abs() < 1e-15);
    }
}
