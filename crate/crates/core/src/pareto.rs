//! Multi-objective search over stage 1 designs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StageOneDesign;
use crate::optimiser::{
    calibrate, rule_objectives, CalibrationOptions, DecisionRule, Objectives, PlanningModel, Problem, Stage2Grid,
};
use crate::par;
use crate::power::stage_one_power;

/// True when `a` is no worse than `b` everywhere and strictly better somewhere.
/// All objectives are minimised.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return Ok(false);
        }
        if x < y {
            strict = true;
        }
    }
    Ok(strict)
}

/// Indices of the non-dominated vectors.
pub fn non_dominated(points: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    'outer: for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i != j && dominates(b, a)? {
                continue 'outer;
            }
        }
        out.push(i);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    ExpectedCost,
    MaxCost,
    ExpectedParticipants,
    MaxParticipants,
    ExpectedClusters,
    MaxClusters,
}

impl Objective {
    pub fn value(&self, o: &Objectives) -> f64 {
        match self {
            Objective::ExpectedCost => o.expected_cost,
            Objective::MaxCost => o.max_cost,
            Objective::ExpectedParticipants => o.expected_participants,
            Objective::MaxParticipants => o.max_participants,
            Objective::ExpectedClusters => o.expected_clusters,
            Objective::MaxClusters => o.max_clusters,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::ExpectedCost => "expected_cost",
            Objective::MaxCost => "max_cost",
            Objective::ExpectedParticipants => "expected_participants",
            Objective::MaxParticipants => "max_participants",
            Objective::ExpectedClusters => "expected_clusters",
            Objective::MaxClusters => "max_clusters",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointStatus {
    Frontier,
    Dominated,
    /// Same objective vector as a frontier design that sorts first.
    Duplicate,
    /// Stage 1 power below the screening threshold.
    Screened,
    /// The target power cannot be reached or the design is invalid.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub design: StageOneDesign,
    pub stage_one_power: f64,
    pub status: PointStatus,
    pub objectives: Option<Objectives>,
    pub rule: Option<DecisionRule>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSpec {
    pub objectives: Vec<Objective>,
    /// Minimum stage 1 power (with stage 1 analysed on its own) for a design to be considered.
    pub screen: f64,
    pub calibration: CalibrationOptions,
}

/// Key used to order designs and break ties between identical objective vectors.
pub fn design_key(d: &StageOneDesign) -> (u8, u32, u32, u32, u32) {
    match *d {
        StageOneDesign::Parallel { k1, m1, t1, baseline } => (0, k1, m1, t1, baseline.map_or(0, |b| b + 1)),
        StageOneDesign::Staggered { k, plan_periods, t1, m1 } => (1, k, plan_periods, t1, m1),
    }
}

fn evaluate(design: &StageOneDesign, grid: &Stage2Grid, model: &PlanningModel, spec: &FrontierSpec) -> ParetoPoint {
    let mut point = ParetoPoint {
        design: *design,
        stage_one_power: f64::NAN,
        status: PointStatus::Infeasible,
        objectives: None,
        rule: None,
        note: None,
    };
    let problem = match Problem::new(*design, grid, model) {
        Ok(p) => p,
        Err(e) => {
            point.note = Some(e.to_string());
            return point;
        }
    };
    let info = problem.info1;
    match stage_one_power(model.delta, info.i1, info.df1, &model.settings) {
        Ok(p) => point.stage_one_power = p,
        Err(e) => {
            point.note = Some(e.to_string());
            return point;
        }
    }
    if point.stage_one_power < spec.screen {
        point.status = PointStatus::Screened;
        return point;
    }
    let rule = match calibrate(&problem, &spec.calibration) {
        Ok(r) => r,
        Err(e) => {
            point.note = Some(e.to_string());
            return point;
        }
    };
    match rule_objectives(&problem, &rule) {
        Ok(o) => {
            point.objectives = Some(o);
            point.rule = Some(rule);
            point.status = PointStatus::Dominated;
        }
        Err(e) => point.note = Some(e.to_string()),
    }
    point
}

/// Calibrate every stage 1 design, then label the non-dominated ones. Points are
/// returned sorted by design, so the result does not depend on input order.
pub fn frontier_search(
    space: &[StageOneDesign],
    grid: &Stage2Grid,
    model: &PlanningModel,
    spec: &FrontierSpec,
) -> Result<Vec<ParetoPoint>> {
    if spec.objectives.is_empty() {
        return Err(Error::InvalidParameter("at least one objective is required".into()));
    }
    let mut designs = space.to_vec();
    designs.sort_by_key(design_key);
    designs.dedup();
    let mut points = par::map(&designs, |d| evaluate(d, grid, model, spec));
    label(&mut points, &spec.objectives)?;
    if points.iter().all(|p| p.objectives.is_none()) {
        return Err(Error::AllInfeasible);
    }
    Ok(points)
}

/// Assign frontier, dominated and duplicate labels to evaluated points.
/// Expects points sorted by design key.
pub fn label(points: &mut [ParetoPoint], objectives: &[Objective]) -> Result<()> {
    let idx: Vec<usize> = (0..points.len()).filter(|&i| points[i].objectives.is_some()).collect();
    let vecs: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| objectives.iter().map(|o| o.value(points[i].objectives.as_ref().expect("evaluated"))).collect())
        .collect();
    let front = non_dominated(&vecs)?;
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for &f in &front {
        let i = idx[f];
        if seen.contains(&&vecs[f]) {
            points[i].status = PointStatus::Duplicate;
        } else {
            points[i].status = PointStatus::Frontier;
            seen.push(&vecs[f]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn length_mismatch_is_an_error() {
        assert_eq!(dominates(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2)));
    }

    #[test]
    fn equal_vectors_do_not_dominate() {
        assert!(!dominates(&[1.0, 2.0], &[1.0, 2.0]).unwrap());
        assert!(dominates(&[1.0, 1.0], &[1.0, 2.0]).unwrap());
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..10.0f64, 3)
    }

    proptest! {
        #[test]
        fn irreflexive(a in vec3()) {
            prop_assert!(!dominates(&a, &a).unwrap());
        }

        #[test]
        fn antisymmetric(a in vec3(), b in vec3()) {
            prop_assert!(!(dominates(&a, &b).unwrap() && dominates(&b, &a).unwrap()));
        }

        #[test]
        fn transitive(a in vec3(), b in vec3(), c in vec3()) {
            if dominates(&a, &b).unwrap() && dominates(&b, &c).unwrap() {
                prop_assert!(dominates(&a, &c).unwrap());
            }
        }

        #[test]
        fn front_is_mutually_non_dominated(points in prop::collection::vec(vec3(), 1..30)) {
            let front = non_dominated(&points).unwrap();
            prop_assert!(!front.is_empty());
            for &i in &front {
                for &j in &front {
                    prop_assert!(!dominates(&points[i], &points[j]).unwrap());
                }
            }
            for i in 0..points.len() {
                if !front.contains(&i) {
                    prop_assert!(front.iter().any(|&j| dominates(&points[j], &points[i]).unwrap()));
                }
            }
        }
    }
}
