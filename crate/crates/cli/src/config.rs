//! TOML configuration: parsing, validation and conversion into engine types.

use crate::error::{CliError, CliResult};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use twostage_core::inference::Sides;
use twostage_core::interim::{EstimationOptions, InterimPolicy};
use twostage_core::model::{logit, CorrelationModel, OutcomeFamily, OutcomeModel, Stage2Params, StageOneDesign};
use twostage_core::optimiser::{
    CalibrationOptions, CostModel, Criterion, PlanningModel, PlanningReference, Stage2Grid,
};
use twostage_core::pareto::{FrontierSpec, Objective};
use twostage_core::power::{SmallSampleModel, TestSettings};

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub outcome: OutcomeSection,
    /// Planning correlation model.
    pub correlation: CorrelationSection,
    pub effect: EffectSection,
    #[serde(default)]
    pub test: TestSection,
    #[serde(default)]
    pub cost: CostSection,
    /// Stage 1 design used by `power`, `rules`, `interim` and `simulate`.
    pub design: Option<DesignSection>,
    pub stage2: Option<Stage2Section>,
    pub rule: Option<RuleSection>,
    pub pareto: Option<ParetoSection>,
    #[serde(default)]
    pub interim: InterimSection,
    pub simulate: Option<SimulateSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSection {
    pub family: Family,
    /// Control-arm event probability (binomial only).
    pub baseline: Option<f64>,
    /// Period effects on the linear predictor scale, one per period.
    #[serde(default)]
    pub period_effects: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    Exchangeable,
    NestedExchangeable,
    ExponentialDecay,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSection {
    pub family: CorrelationKind,
    pub icc: f64,
    /// Cluster autocorrelation (nested-exchangeable only).
    pub cac: Option<f64>,
    /// Per-period decay (exponential-decay only).
    pub decay: Option<f64>,
    /// Binomial overdispersion.
    pub dispersion: Option<f64>,
}

/// Target effect. Give exactly one of `delta` (linear predictor scale) or
/// `risk_difference` (binomial outcomes, converted to a log odds ratio).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EffectSection {
    pub delta: Option<f64>,
    pub risk_difference: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    Two,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum TModel {
    Shifted,
    Noncentral,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_sides")]
    pub sides: Sidedness,
    /// Between-within t correction.
    #[serde(default)]
    pub small_sample: bool,
    #[serde(default = "default_t_model")]
    pub small_sample_model: TModel,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_sides() -> Sidedness {
    Sidedness::Two
}
fn default_t_model() -> TModel {
    TModel::Shifted
}

impl Default for TestSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            sides: default_sides(),
            small_sample: false,
            small_sample_model: default_t_model(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Cost of one cluster in participant equivalents.
    #[serde(default)]
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DesignSection {
    Parallel {
        k1: u32,
        m1: u32,
        #[serde(default = "one")]
        t1: u32,
        /// Cluster size of an all-control baseline period.
        baseline: Option<u32>,
    },
    Staggered {
        k: u32,
        plan_periods: u32,
        t1: u32,
        m1: u32,
    },
}

fn one() -> u32 {
    1
}

impl DesignSection {
    pub fn to_core(self) -> StageOneDesign {
        match self {
            DesignSection::Parallel { k1, m1, t1, baseline } => StageOneDesign::Parallel { k1, m1, t1, baseline },
            DesignSection::Staggered { k, plan_periods, t1, m1 } => {
                StageOneDesign::Staggered { k, plan_periods, t1, m1 }
            }
        }
    }
}

/// A list of values, a single value, or an inclusive range.
#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum Axis {
    One(u32),
    List(Vec<u32>),
    Range {
        from: u32,
        to: u32,
        #[serde(default = "one")]
        step: u32,
    },
}

impl Axis {
    pub fn values(&self, name: &str) -> CliResult<Vec<u32>> {
        let v = match self {
            Axis::One(x) => vec![*x],
            Axis::List(v) => v.clone(),
            Axis::Range { from, to, step } => {
                if *step == 0 || from > to {
                    return Err(CliError::Config(format!("{name}: range needs from <= to and step > 0")));
                }
                (*from..=*to).step_by(*step as usize).collect()
            }
        };
        if v.is_empty() {
            return Err(CliError::Config(format!("{name}: no values")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum Reference {
    Named(ReferenceName),
    Explicit(ExplicitReference),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceName {
    /// Continue as in stage 1 with no new clusters.
    Continue,
    /// Grid design with the most conditional information.
    MaxGrid,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExplicitReference {
    #[serde(default)]
    pub k2: u32,
    pub m2: u32,
    #[serde(default = "one")]
    pub t2: u32,
    #[serde(default = "unit")]
    pub r: f64,
}

fn unit() -> f64 {
    1.0
}

fn continue_reference() -> Reference {
    Reference::Named(ReferenceName::Continue)
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    /// New clusters per arm.
    #[serde(default = "zero_axis")]
    pub k2: Axis,
    pub m2: Axis,
    #[serde(default = "one_axis")]
    pub t2: Axis,
    /// Staggering fractions in [0, 1].
    #[serde(default = "unit_list")]
    pub r: Vec<f64>,
    /// Stage 2 design whose information fixes the combination weights.
    #[serde(default = "continue_reference")]
    pub reference: Reference,
}

fn zero_axis() -> Axis {
    Axis::One(0)
}
fn one_axis() -> Axis {
    Axis::One(1)
}
fn unit_list() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum RuleCriterion {
    CostPenalised,
    BudgetConstrained,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RuleSection {
    /// Target total power.
    pub target: f64,
    pub criterion: RuleCriterion,
    /// Interim grid points between the efficacy boundaries.
    pub z_points: Option<usize>,
    /// Conditional power below which the budget rule stops for futility.
    pub futility_floor: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveName {
    ExpectedCost,
    MaxCost,
    ExpectedParticipants,
    MaxParticipants,
    ExpectedClusters,
    MaxClusters,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ParetoSection {
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveName>,
    /// Minimum stage 1 power; designs below it are not calibrated.
    #[serde(default)]
    pub screen: f64,
    pub space: Vec<SpaceSection>,
}

fn default_objectives() -> Vec<ObjectiveName> {
    vec![ObjectiveName::ExpectedCost, ObjectiveName::MaxCost]
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpaceSection {
    Parallel {
        k1: Axis,
        m1: Axis,
        #[serde(default = "one_axis")]
        t1: Axis,
        /// Baseline period sizes; 0 means no baseline period.
        #[serde(default = "zero_axis")]
        baseline: Axis,
    },
    Staggered {
        k: Axis,
        plan_periods: Axis,
        t1: Axis,
        m1: Axis,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    #[default]
    Estimate,
    Conservative,
}

impl Policy {
    pub fn to_core(self) -> InterimPolicy {
        match self {
            Policy::Estimate => InterimPolicy::Estimate,
            Policy::Conservative => InterimPolicy::Conservative,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InterimSection {
    #[serde(default)]
    pub policy: Policy,
    /// Continuity correction for binomial cells with all or no events.
    #[serde(default = "half")]
    pub continuity: f64,
    #[serde(default = "yes")]
    pub intervals: bool,
    /// Known within-cell variance for Gaussian outcomes.
    pub within_variance: Option<f64>,
}

fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

impl Default for InterimSection {
    fn default() -> Self {
        Self { policy: Policy::Estimate, continuity: half(), intervals: true, within_variance: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
    /// True effect on the linear predictor scale; defaults to the planning effect.
    pub delta: Option<f64>,
    /// True correlation model; defaults to the planning model.
    pub truth: Option<CorrelationSection>,
    /// Re-estimate the correlation model at the interim.
    #[serde(default)]
    pub reestimate: bool,
    #[serde(default)]
    pub policy: Policy,
    /// Write a per-replicate trace.
    #[serde(default)]
    pub trace: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            replicates: default_replicates(),
            seed: 1,
            delta: None,
            truth: None,
            reestimate: false,
            policy: Policy::Estimate,
            trace: false,
        }
    }
}

fn default_replicates() -> usize {
    10_000
}
fn one_u64() -> u64 {
    1
}

impl CorrelationSection {
    pub fn to_core(&self) -> CliResult<CorrelationModel> {
        let dispersion = self.dispersion.unwrap_or(1.0);
        let m = match self.family {
            CorrelationKind::Exchangeable => {
                self.reject_extra(self.cac.is_some(), "cac")?;
                self.reject_extra(self.decay.is_some(), "decay")?;
                CorrelationModel::exchangeable(self.icc, dispersion)
            }
            CorrelationKind::NestedExchangeable => {
                self.reject_extra(self.decay.is_some(), "decay")?;
                let cac = self.cac.ok_or_else(|| CliError::Config("correlation.cac is required".into()))?;
                CorrelationModel::nested_exchangeable(self.icc, cac, dispersion)
            }
            CorrelationKind::ExponentialDecay => {
                self.reject_extra(self.cac.is_some(), "cac")?;
                let decay = self.decay.ok_or_else(|| CliError::Config("correlation.decay is required".into()))?;
                CorrelationModel::exponential_decay(self.icc, decay, dispersion)
            }
        };
        m.map_err(|e| CliError::Config(format!("correlation: {e}")))
    }

    fn reject_extra(&self, present: bool, key: &str) -> CliResult<()> {
        if present {
            Err(CliError::Config(format!("correlation.{key} does not apply to the {:?} family", self.family)))
        } else {
            Ok(())
        }
    }
}

impl Config {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        self.outcome()?;
        self.correlation.to_core()?;
        self.delta()?;
        self.settings()?;
        CostModel::new(self.cost.rho).map_err(|e| CliError::Config(format!("cost: {e}")))?;
        if let Some(d) = self.design {
            d.to_core().validate().map_err(|e| CliError::Config(format!("design: {e}")))?;
        }
        if self.stage2.is_some() {
            self.grid()?;
        }
        if let Some(r) = self.rule {
            if !(r.target > 0.0 && r.target < 1.0) {
                return Err(CliError::Config(format!("rule.target must lie in (0, 1), got {}", r.target)));
            }
        }
        if let Some(p) = &self.pareto {
            self.space()?;
            if p.objectives.is_empty() {
                return Err(CliError::Config("pareto.objectives is empty".into()));
            }
            if !(0.0..1.0).contains(&p.screen) {
                return Err(CliError::Config(format!("pareto.screen must lie in [0, 1), got {}", p.screen)));
            }
        }
        if let Some(s) = &self.simulate {
            if s.replicates == 0 {
                return Err(CliError::Config("simulate.replicates must be positive".into()));
            }
            if let Some(t) = &s.truth {
                t.to_core().map_err(|e| CliError::Config(format!("simulate.truth: {e}")))?;
            }
        }
        if !(self.interim.continuity > 0.0 && self.interim.continuity < 1.0) {
            return Err(CliError::Config("interim.continuity must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn outcome(&self) -> CliResult<OutcomeModel> {
        let o = &self.outcome;
        let model = match o.family {
            Family::Gaussian => {
                if o.baseline.is_some() {
                    return Err(CliError::Config("outcome.baseline applies to binomial outcomes only".into()));
                }
                OutcomeModel {
                    family: OutcomeFamily::GaussianIdentity,
                    baseline: 0.0,
                    period_effects: o.period_effects.clone(),
                }
            }
            Family::Binomial => {
                let p = o
                    .baseline
                    .ok_or_else(|| CliError::Config("outcome.baseline is required for binomial outcomes".into()))?;
                OutcomeModel {
                    family: OutcomeFamily::BinomialLogit,
                    baseline: p,
                    period_effects: o.period_effects.clone(),
                }
            }
        };
        model.validate().map_err(|e| CliError::Config(format!("outcome: {e}")))?;
        Ok(model)
    }

    /// Target effect on the linear predictor scale.
    pub fn delta(&self) -> CliResult<f64> {
        match (self.effect.delta, self.effect.risk_difference) {
            (Some(d), None) if d.is_finite() => Ok(d),
            (None, Some(rd)) => {
                let p0 = match (self.outcome.family, self.outcome.baseline) {
                    (Family::Binomial, Some(p0)) => p0,
                    _ => {
                        return Err(CliError::Config(
                            "effect.risk_difference needs a binomial outcome with a baseline".into(),
                        ))
                    }
                };
                let p1 = p0 + rd;
                if !(p1 > 0.0 && p1 < 1.0) {
                    return Err(CliError::Config(format!(
                        "effect.risk_difference gives a treated probability of {p1}"
                    )));
                }
                Ok(logit(p1) - logit(p0))
            }
            (Some(_), Some(_)) => {
                Err(CliError::Config("give only one of effect.delta and effect.risk_difference".into()))
            }
            _ => Err(CliError::Config("effect needs a finite delta or a risk_difference".into())),
        }
    }

    pub fn settings(&self) -> CliResult<TestSettings> {
        let t = &self.test;
        if !(t.alpha > 0.0 && t.alpha <= 1.0) {
            return Err(CliError::Config(format!("test.alpha must lie in (0, 1], got {}", t.alpha)));
        }
        Ok(TestSettings {
            alpha: t.alpha,
            sides: match t.sides {
                Sidedness::Two => Sides::Two,
                Sidedness::One => Sides::One,
            },
            small_sample: t.small_sample,
            small_sample_model: match t.small_sample_model {
                TModel::Shifted => SmallSampleModel::Shifted,
                TModel::Noncentral => SmallSampleModel::Noncentral,
            },
        })
    }

    pub fn planning_model(&self) -> CliResult<PlanningModel> {
        let reference = match self.stage2.as_ref().map(|s| &s.reference) {
            None | Some(Reference::Named(ReferenceName::Continue)) => PlanningReference::Continue,
            Some(Reference::Named(ReferenceName::MaxGrid)) => PlanningReference::MaxGrid,
            Some(Reference::Explicit(e)) => {
                PlanningReference::Explicit(Stage2Params { k2: e.k2, m2: e.m2, t2: e.t2, r: e.r })
            }
        };
        Ok(PlanningModel {
            corr: self.correlation.to_core()?,
            outcome: self.outcome()?,
            delta: self.delta()?,
            settings: self.settings()?,
            cost: CostModel::new(self.cost.rho).map_err(|e| CliError::Config(format!("cost: {e}")))?,
            reference,
        })
    }

    pub fn design(&self) -> CliResult<StageOneDesign> {
        self.design.map(DesignSection::to_core).ok_or_else(|| CliError::Config("missing [design] section".into()))
    }

    pub fn grid(&self) -> CliResult<Stage2Grid> {
        let s = self.stage2.as_ref().ok_or_else(|| CliError::Config("missing [stage2] section".into()))?;
        let grid = Stage2Grid {
            k2: s.k2.values("stage2.k2")?,
            m2: s.m2.values("stage2.m2")?,
            t2: s.t2.values("stage2.t2")?,
            r: s.r.clone(),
        };
        if grid.r.is_empty() || grid.r.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(CliError::Config("stage2.r values must lie in [0, 1]".into()));
        }
        Ok(grid)
    }

    pub fn calibration(&self) -> CliResult<CalibrationOptions> {
        let r = self.rule.ok_or_else(|| CliError::Config("missing [rule] section".into()))?;
        let criterion = match r.criterion {
            RuleCriterion::CostPenalised => Criterion::CostPenalised,
            RuleCriterion::BudgetConstrained => Criterion::BudgetConstrained,
        };
        let mut o = CalibrationOptions::new(r.target, criterion);
        if let Some(v) = r.z_points {
            o.z_points = v;
        }
        if let Some(v) = r.futility_floor {
            o.futility_floor = v;
        }
        if let Some(v) = r.tolerance {
            o.tolerance = v;
        }
        if let Some(v) = r.max_iter {
            o.max_iter = v;
        }
        Ok(o)
    }

    pub fn frontier_spec(&self) -> CliResult<FrontierSpec> {
        let p = self.pareto.as_ref().ok_or_else(|| CliError::Config("missing [pareto] section".into()))?;
        let objectives = p
            .objectives
            .iter()
            .map(|o| match o {
                ObjectiveName::ExpectedCost => Objective::ExpectedCost,
                ObjectiveName::MaxCost => Objective::MaxCost,
                ObjectiveName::ExpectedParticipants => Objective::ExpectedParticipants,
                ObjectiveName::MaxParticipants => Objective::MaxParticipants,
                ObjectiveName::ExpectedClusters => Objective::ExpectedClusters,
                ObjectiveName::MaxClusters => Objective::MaxClusters,
            })
            .collect();
        Ok(FrontierSpec { objectives, screen: p.screen, calibration: self.calibration()? })
    }

    /// Stage 1 search space in the order written.
    pub fn space(&self) -> CliResult<Vec<StageOneDesign>> {
        let p = self.pareto.as_ref().ok_or_else(|| CliError::Config("missing [pareto] section".into()))?;
        let mut out = Vec::new();
        for s in &p.space {
            match s {
                SpaceSection::Parallel { k1, m1, t1, baseline } => {
                    for k1 in k1.values("pareto.space.k1")? {
                        for b in baseline.values("pareto.space.baseline")? {
                            for t1 in t1.values("pareto.space.t1")? {
                                for m1 in m1.values("pareto.space.m1")? {
                                    let baseline = (b > 0).then_some(b);
                                    out.push(StageOneDesign::Parallel { k1, m1, t1, baseline });
                                }
                            }
                        }
                    }
                }
                SpaceSection::Staggered { k, plan_periods, t1, m1 } => {
                    for k in k.values("pareto.space.k")? {
                        for plan_periods in plan_periods.values("pareto.space.plan_periods")? {
                            for t1 in t1.values("pareto.space.t1")? {
                                for m1 in m1.values("pareto.space.m1")? {
                                    out.push(StageOneDesign::Staggered { k, plan_periods, t1, m1 });
                                }
                            }
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Config("pareto.space is empty".into()));
        }
        for d in &out {
            d.validate().map_err(|e| CliError::Config(format!("pareto.space: {e}")))?;
        }
        Ok(out)
    }

    pub fn estimation(&self) -> EstimationOptions {
        EstimationOptions {
            intervals: self.interim.intervals,
            continuity: self.interim.continuity,
            within_variance: self.interim.within_variance,
        }
    }

    /// Digest of the whole configuration after defaults are filled in.
    pub fn hash(&self) -> String {
        digest(self)
    }

    /// Digest of the sections a plan depends on. Simulation, interim and
    /// frontier settings can change without invalidating a plan.
    pub fn plan_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            outcome: &'a OutcomeSection,
            correlation: &'a CorrelationSection,
            effect: &'a EffectSection,
            test: &'a TestSection,
            cost: &'a CostSection,
            design: &'a Option<DesignSection>,
            stage2: &'a Option<Stage2Section>,
            rule: &'a Option<RuleSection>,
        }
        digest(&Key {
            outcome: &self.outcome,
            correlation: &self.correlation,
            effect: &self.effect,
            test: &self.test,
            cost: &self.cost,
            design: &self.design,
            stage2: &self.stage2,
            rule: &self.rule,
        })
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn schema() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(Config)).expect("schema serialises")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        [outcome]
        family = "gaussian"
        [correlation]
        family = "nested-exchangeable"
        icc = 0.05
        cac = 0.8
        [effect]
        delta = 0.25
    "#;

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = Config::from_toml(&format!("{BASE}\n[cost]\nrho = 30\nrhoo = 2\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rhoo") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn axes_expand() {
        let cfg =
            Config::from_toml(&format!("{BASE}\n[stage2]\nk2 = {{ from = 0, to = 4 }}\nm2 = [10, 20]\n")).unwrap();
        let g = cfg.grid().unwrap();
        assert_eq!(g.k2, vec![0, 1, 2, 3, 4]);
        assert_eq!(g.m2, vec![10, 20]);
        assert_eq!(g.t2, vec![1]);
    }

    #[test]
    fn risk_difference_converts_to_log_odds() {
        let text = BASE
            .replace("family = \"gaussian\"", "family = \"binomial\"\nbaseline = 0.2")
            .replace("delta = 0.25", "risk_difference = -0.07");
        let cfg = Config::from_toml(&text).unwrap();
        assert!((cfg.delta().unwrap() - (logit(0.13) - logit(0.2))).abs() < 1e-15);
    }

    #[test]
    fn family_parameters_are_checked() {
        let text = BASE.replace("cac = 0.8", "decay = 0.8");
        assert!(Config::from_toml(&text).is_err());
    }

    #[test]
    fn plan_key_ignores_simulation_settings() {
        let a = Config::from_toml(BASE).unwrap();
        let b = Config::from_toml(&format!("{BASE}\n[simulate]\nreplicates = 5\n")).unwrap();
        assert_eq!(a.plan_key(), b.plan_key());
        assert_ne!(a.hash(), b.hash());
    }
}
