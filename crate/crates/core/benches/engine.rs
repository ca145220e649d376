use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion as Bench};
use std::hint::black_box;
use twostage_core::model::*;
use twostage_core::optimiser::*;
use twostage_core::par::{self, Mode};
use twostage_core::pareto::{frontier_search, FrontierSpec, Objective};
use twostage_core::power::TestSettings;
use twostage_core::sim::{run_scenario, InterimMode, Scenario};

fn model() -> PlanningModel {
    PlanningModel {
        corr: CorrelationModel::nested_exchangeable(0.05, 0.8, 1.0).unwrap(),
        outcome: OutcomeModel::gaussian(),
        delta: 0.25,
        settings: TestSettings { small_sample: true, ..Default::default() },
        cost: CostModel::new(30.0).unwrap(),
        reference: PlanningReference::Continue,
    }
}

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn calibration(c: &mut Bench) {
    let design = StageOneDesign::Parallel { k1: 15, m1: 20, t1: 1, baseline: None };
    let grid = Stage2Grid::parallel(4, 100, 1);
    let mut g = c.benchmark_group("calibrate");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("problem+calibrate", name), |b| {
            par::set_mode(mode);
            b.iter(|| {
                let p = Problem::new(design, &grid, &model()).unwrap();
                black_box(calibrate(&p, &CalibrationOptions::new(0.8, Criterion::CostPenalised)).unwrap())
            })
        });
    }
    g.finish();
}

fn simulation(c: &mut Bench) {
    let design = StageOneDesign::Parallel { k1: 16, m1: 25, t1: 1, baseline: None };
    let p = Problem::new(design, &Stage2Grid::parallel(4, 100, 10), &model()).unwrap();
    let rule = calibrate(&p, &CalibrationOptions::new(0.8, Criterion::BudgetConstrained)).unwrap();
    let scenario =
        Scenario { truth: p.model.corr, delta: 0.0, replicates: 2000, seed: 1, interim: InterimMode::Planned };
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("2000 replicates", name), |b| {
            par::set_mode(mode);
            b.iter(|| black_box(run_scenario(&p, &rule, &scenario).unwrap()))
        });
    }
    g.finish();
}

fn frontier(c: &mut Bench) {
    let space: Vec<StageOneDesign> = (12..=16)
        .flat_map(|k1| (1..=5).map(move |i| StageOneDesign::Parallel { k1, m1: 10 * i, t1: 1, baseline: None }))
        .collect();
    let grid = Stage2Grid::parallel(4, 100, 10);
    let spec = FrontierSpec {
        objectives: vec![Objective::ExpectedCost, Objective::MaxCost],
        screen: 0.5,
        calibration: CalibrationOptions::new(0.8, Criterion::CostPenalised),
    };
    let mut g = c.benchmark_group("frontier");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("25 designs", name), |b| {
            par::set_mode(mode);
            b.iter(|| black_box(frontier_search(&space, &grid, &model(), &spec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, calibration, simulation, frontier);
criterion_main!(benches);
