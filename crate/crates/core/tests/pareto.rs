use twostage_core::model::*;
use twostage_core::optimiser::*;
use twostage_core::pareto::*;
use twostage_core::power::TestSettings;
use twostage_core::Error;

fn model() -> PlanningModel {
    PlanningModel {
        corr: CorrelationModel::nested_exchangeable(0.05, 0.8, 1.0).unwrap(),
        outcome: OutcomeModel::gaussian(),
        delta: 0.25,
        settings: TestSettings::default(),
        cost: CostModel::new(30.0).unwrap(),
        reference: PlanningReference::Continue,
    }
}

fn space() -> Vec<StageOneDesign> {
    let mut out = Vec::new();
    for k1 in 12..=16 {
        for m1 in [10, 20, 30, 40, 50] {
            out.push(StageOneDesign::Parallel { k1, m1, t1: 1, baseline: None });
        }
    }
    out
}

fn spec() -> FrontierSpec {
    FrontierSpec {
        objectives: vec![Objective::ExpectedCost, Objective::MaxCost],
        screen: 0.6,
        calibration: CalibrationOptions::new(0.8, Criterion::CostPenalised),
    }
}

fn summary(points: &[ParetoPoint]) -> Vec<(String, PointStatus)> {
    points.iter().map(|p| (format!("{:?}", p.design), p.status)).collect()
}

#[test]
fn frontier_matches_brute_force_and_ignores_order_and_duplicates() {
    let grid = Stage2Grid::parallel(4, 100, 10);
    let points = frontier_search(&space(), &grid, &model(), &spec()).unwrap();
    let evaluated: Vec<&ParetoPoint> = points.iter().filter(|p| p.objectives.is_some()).collect();
    let vec_of = |p: &ParetoPoint| {
        let o = p.objectives.unwrap();
        vec![o.expected_cost, o.max_cost]
    };
    for a in &evaluated {
        let dominated = evaluated.iter().any(|b| dominates(&vec_of(b), &vec_of(a)).unwrap());
        match a.status {
            PointStatus::Frontier => assert!(!dominated),
            PointStatus::Dominated => assert!(dominated),
            PointStatus::Duplicate => assert!(!dominated),
            s => panic!("evaluated point labelled {s:?}"),
        }
    }
    assert!(points.iter().any(|p| p.status == PointStatus::Screened));

    let mut shuffled = space();
    shuffled.reverse();
    shuffled.extend(space().into_iter().step_by(3));
    let again = frontier_search(&shuffled, &grid, &model(), &spec()).unwrap();
    assert_eq!(summary(&points), summary(&again));
}

#[test]
fn single_candidate_is_its_own_frontier() {
    let grid = Stage2Grid::parallel(4, 100, 10);
    let one = [StageOneDesign::Parallel { k1: 15, m1: 20, t1: 1, baseline: None }];
    let s = FrontierSpec { screen: 0.0, ..spec() };
    let points = frontier_search(&one, &grid, &model(), &s).unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0].status, PointStatus::Frontier);
}

#[test]
fn all_infeasible_is_an_error() {
    let grid = Stage2Grid::parallel(1, 10, 10);
    let tiny = [StageOneDesign::Parallel { k1: 2, m1: 5, t1: 1, baseline: None }];
    let mut s = spec();
    s.screen = 0.0;
    s.calibration.target = 0.99;
    assert_eq!(frontier_search(&tiny, &grid, &model(), &s).unwrap_err(), Error::AllInfeasible);
}
