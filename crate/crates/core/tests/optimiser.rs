use proptest::prelude::*;
use twostage_core::inference::CombinationWeights;
use twostage_core::model::*;
use twostage_core::optimiser::*;
use twostage_core::power::*;

fn model(small_sample: bool) -> PlanningModel {
    PlanningModel {
        corr: CorrelationModel::nested_exchangeable(0.05, 0.8, 1.0).unwrap(),
        outcome: OutcomeModel::gaussian(),
        delta: 0.25,
        settings: TestSettings { small_sample, ..Default::default() },
        cost: CostModel::new(30.0).unwrap(),
        reference: PlanningReference::Continue,
    }
}

fn problem(step: u32) -> Problem {
    let design = StageOneDesign::Parallel { k1: 15, m1: 20, t1: 1, baseline: None };
    Problem::new(design, &Stage2Grid::parallel(4, 100, step), &model(false)).unwrap()
}

#[test]
fn calibration_is_deterministic() {
    let p = problem(10);
    for crit in [Criterion::CostPenalised, Criterion::BudgetConstrained] {
        let a = calibrate(&p, &CalibrationOptions::new(0.8, crit)).unwrap();
        let b = calibrate(&problem(10), &CalibrationOptions::new(0.8, crit)).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}

#[test]
fn budget_rule_respects_cap_in_every_cell() {
    let p = problem(10);
    let rule = calibrate(&p, &CalibrationOptions::new(0.8, Criterion::BudgetConstrained)).unwrap();
    for a in &rule.actions {
        if let Action::Continue(j) = a {
            assert!(p.candidates[*j].cost <= rule.calibration);
        }
    }
    let o = rule_objectives(&p, &rule).unwrap();
    assert!(o.max_cost <= p.cost1 + rule.calibration);
}

#[test]
fn refining_the_grid_does_not_lose_power() {
    let opts = CalibrationOptions::new(0.8, Criterion::CostPenalised);
    let coarse = calibrate(&problem(20), &opts).unwrap();
    let fine = calibrate(&problem(10), &opts).unwrap();
    assert!(fine.power >= coarse.power - opts.tolerance, "{} vs {}", fine.power, coarse.power);
}

#[test]
fn always_stop_rule_has_stage_one_objectives() {
    let p = problem(10);
    let rule = DecisionRule::always_stop(&p.query, 201);
    let o = rule_objectives(&p, &rule).unwrap();
    assert_eq!(o.expected_participants, p.n1 as f64);
    assert_eq!(o.max_participants, p.n1 as f64);
    assert!((o.power - p.query.efficacy_probability()).abs() < 1e-12);
}

#[test]
fn stage_two_with_no_information_leaves_only_stage_one_power() {
    let p = problem(10);
    let q = &p.query;
    let c = q.boundary();
    let cells: Vec<StepCell> = (0..10)
        .map(|i| {
            let lo = -c + 2.0 * c * i as f64 / 10.0;
            StepCell { lo, hi: lo + 0.2 * c, stage_two: Some((0.0, f64::INFINITY)) }
        })
        .collect();
    let power = total_power(q, &cells).unwrap();
    let w = q.weights();
    // with no stage 2 information the combination rejects only through w1 z1
    let null_cp_mass: f64 = cells.iter().map(|s| q.cell_integral(s.lo, s.hi, 0.0, f64::INFINITY, 1e-10).unwrap()).sum();
    assert!((power - q.efficacy_probability() - null_cp_mass).abs() < 1e-6);
    assert!(w.w2() > 0.0);
}

#[test]
fn one_candidate_grid_gives_constant_rule() {
    let design = StageOneDesign::Parallel { k1: 15, m1: 20, t1: 1, baseline: None };
    let grid = Stage2Grid { k2: vec![2], m2: vec![40], t2: vec![1], r: vec![1.0] };
    let p = Problem::new(design, &grid, &model(false)).unwrap();
    let rule = calibrate(&p, &CalibrationOptions::new(0.6, Criterion::BudgetConstrained)).unwrap();
    let continued: Vec<_> = rule.actions.iter().filter(|a| matches!(a, Action::Continue(_))).collect();
    assert!(continued.iter().all(|a| **a == Action::Continue(0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditional_power_non_decreasing_in_information(
        z1 in 0.0..2.5f64, i_a in 0.0..400.0f64, i_b in 0.0..400.0f64, w1sq in 0.1..0.9f64, small in any::<bool>()
    ) {
        let weights = CombinationWeights::from_information(w1sq, 1.0 - w1sq, 1.959963984540054).unwrap();
        let settings = TestSettings { small_sample: small, ..Default::default() };
        let q = PowerQuery::new(0.25, settings, weights, 100.0, 40.0).unwrap();
        let (lo, hi) = if i_a < i_b { (i_a, i_b) } else { (i_b, i_a) };
        let z1 = z1.min(q.boundary());
        let a = q.conditional_power(z1, lo, 30.0).unwrap();
        let b = q.conditional_power(z1, hi, 30.0).unwrap();
        prop_assert!(b >= a - 1e-12, "{} > {}", a, b);
    }

    #[test]
    fn penalised_value_non_increasing_in_lambda(z1 in -2.5f64..2.5, l_a in 0.0..0.002f64, l_b in 0.0..0.002f64) {
        let p = problem(20);
        let z1 = z1.clamp(-p.query.boundary(), p.query.boundary());
        let cps = conditional_powers(z1, &p.candidates, &p.query).unwrap();
        let value = |l: f64| cps.iter().zip(&p.candidates).map(|(cp, c)| cp - l * c.cost).fold(f64::MIN, f64::max);
        let (lo, hi) = if l_a < l_b { (l_a, l_b) } else { (l_b, l_a) };
        prop_assert!(value(hi) <= value(lo));
    }
}
