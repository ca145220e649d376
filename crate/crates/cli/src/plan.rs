//! Frozen plan files written by `rules` and read back by `interim`, `simulate` and `power`.

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::output::Provenance;
use serde::{Deserialize, Serialize};
use std::path::Path;
use twostage_core::inference::CombinationWeights;
use twostage_core::model::{Stage2Params, StageOneDesign};
use twostage_core::optimiser::{
    rule_objectives, CalibrationOptions, Candidate, DecisionRule, Objectives, PlanningModel, Problem, Stage2Grid,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneSummary {
    pub participants: u64,
    pub clusters: usize,
    pub cost: f64,
    pub i1: f64,
    pub df1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub provenance: Provenance,
    /// Digest of the planning sections of the configuration.
    pub plan_key: String,
    pub design: StageOneDesign,
    pub grid: Stage2Grid,
    pub model: PlanningModel,
    pub calibration: CalibrationOptions,
    pub reference: Stage2Params,
    pub weights: CombinationWeights,
    pub stage_one: StageOneSummary,
    pub rule: DecisionRule,
    pub objectives: Objectives,
    pub candidates: Vec<Candidate>,
}

impl PlanFile {
    pub fn new(provenance: Provenance, cfg: &Config, problem: &Problem, rule: &DecisionRule) -> CliResult<Self> {
        Ok(Self {
            provenance,
            plan_key: cfg.plan_key(),
            design: problem.design,
            grid: cfg.grid()?,
            model: problem.model.clone(),
            calibration: cfg.calibration()?,
            reference: problem.reference,
            weights: *problem.weights(),
            stage_one: StageOneSummary {
                participants: problem.n1,
                clusters: problem.k1,
                cost: problem.cost1,
                i1: problem.info1.i1,
                df1: problem.info1.df1,
            },
            rule: rule.clone(),
            objectives: rule_objectives(problem, rule)?,
            candidates: problem.candidates.clone(),
        })
    }
}

/// Read a plan, check it belongs to `cfg` and rebuild the planning problem.
/// The rule is taken from the file as written; the weights and candidate
/// list recomputed from the configuration must match it bit for bit.
pub fn load(path: &Path, cfg: &Config) -> CliResult<(Problem, DecisionRule)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let plan: PlanFile = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
    let key = cfg.plan_key();
    if plan.plan_key != key {
        return Err(CliError::Config(format!(
            "{}: plan was made from a different configuration (plan key {}, config key {key})",
            path.display(),
            plan.plan_key
        )));
    }
    let problem = Problem::new(plan.design, &plan.grid, &plan.model)?;
    if problem.model != cfg.planning_model()? || problem.design != cfg.design()? {
        return Err(CliError::Config(format!("{}: planning model differs from the configuration", path.display())));
    }
    if *problem.weights() != plan.weights || problem.candidates != plan.candidates {
        return Err(CliError::Config(format!(
            "{}: recomputed weights or stage 2 candidates differ from the frozen plan",
            path.display()
        )));
    }
    if plan
        .rule
        .actions
        .iter()
        .any(|a| matches!(a, twostage_core::optimiser::Action::Continue(j) if *j >= problem.candidates.len()))
    {
        return Err(CliError::Config(format!("{}: rule refers to a missing candidate", path.display())));
    }
    Ok((problem, plan.rule))
}
