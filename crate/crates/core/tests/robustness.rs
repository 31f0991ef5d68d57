mod common;

use common::{example_cost, example_system};
use mfsc_core::dualloop::{DualLoopConfig, GameInstance};
use mfsc_core::robust::{
    default_inner_index, fit_geometric_offset, inner_context, iss_sweep, reference_solution, run_inexact_inner,
    run_inexact_outer, worst_inner_direction, zero_disturbance_traces, Direction, DisturbanceMode, DisturbanceSchedule,
    RobustnessReport, SLOPE_RANGE,
};
use mfsc_core::stabilizer::InitStrategy;
use mfsc_core::Mat;

const GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

fn init() -> InitStrategy {
    InitStrategy::Lmi { seed: 0 }
}

#[test]
fn fixed_direction_sweep_is_bounded_monotone_and_quadratic() {
    let (sys, cost) = (example_system(), example_cost());
    let summary = iss_sweep(&sys, &cost, &DualLoopConfig::default(), &init(), &GRID, Direction::AllOnes).unwrap();
    assert!(summary.violations().is_empty(), "{:?}", summary.violations());
    for report in [&summary.outer, &summary.inner] {
        assert!(report.breakdown_magnitude().is_none());
        assert!(report.runs.iter().all(|r| r.steady_error().is_finite() && r.is_bounded()));
        assert!(report.is_monotone(0));
        let slope = report.log_log_slope().unwrap();
        assert!((SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope), "slope {slope}");
    }
}

#[test]
fn zero_magnitude_reproduces_the_exact_solver() {
    let (sys, cost) = (example_system(), example_cost());
    let cfg = DualLoopConfig::default();
    let (exact, hooked) = zero_disturbance_traces(&sys, &cost, &cfg, &init()).unwrap();
    assert_eq!(exact, hooked);

    let sched = DisturbanceSchedule::fixed(0.0, DisturbanceMode::Both);
    let outer = run_inexact_outer(&sys, &cost, &cfg, &init(), &sched).unwrap();
    assert!(*outer.errors.last().unwrap() < 1e-8, "{:?}", outer.errors.last());
    let inner = run_inexact_inner(&sys, &cost, &cfg, &init(), &sched, 1).unwrap();
    assert!(*inner.errors.last().unwrap() < 1e-8, "{:?}", inner.errors.last());

    let summary = iss_sweep(&sys, &cost, &cfg, &init(), &[0.0], Direction::AllOnes).unwrap();
    assert!(summary.outer.runs[0].steady_error() < 1e-8);
    assert!(summary.inner.runs[0].steady_error() < 1e-8);
    assert!(summary.violations().is_empty());
}

#[test]
fn large_magnitudes_are_flagged_as_breakdown() {
    let (sys, cost) = (example_system(), example_cost());
    let grid = [1e-4, 1e-3, 1e-2, 1e2];
    let summary = iss_sweep(&sys, &cost, &DualLoopConfig::default(), &init(), &grid, Direction::AllOnes).unwrap();
    assert_eq!(summary.outer.breakdown_magnitude(), Some(1e2));
    assert_eq!(summary.inner.breakdown_magnitude(), Some(1e2));
    assert_eq!(summary.outer.stable_prefix().len(), 3);
    assert!(summary.violations().is_empty(), "{:?}", summary.violations());
}

#[test]
fn random_directions_keep_the_trend() {
    let (sys, cost) = (example_system(), example_cost());
    let grid = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2];
    let summary =
        iss_sweep(&sys, &cost, &DualLoopConfig::default(), &init(), &grid, Direction::Random { seed: 11 }).unwrap();
    for report in [&summary.outer, &summary.inner] {
        let rho = report.rank_correlation().unwrap();
        assert!(rho > 0.8, "Spearman {rho}");
    }
}

#[test]
fn worst_direction_hurts_at_least_as_much_as_a_random_one() {
    let (sys, cost) = (example_system(), example_cost());
    let cfg = DualLoopConfig::default();
    let (_, trace) = reference_solution(&sys, &cost, &cfg, &init()).unwrap();
    let k_fixed = default_inner_index(&trace);
    let ctx = inner_context(&trace, &Mat::zeros(1, 2), k_fixed).unwrap();
    let worst = worst_inner_direction(&GameInstance::stochastic(&sys, &cost), &ctx).unwrap();
    let run = |direction: Direction| {
        let sched = DisturbanceSchedule::fixed(1e-3, DisturbanceMode::PerInner).with_direction(direction);
        run_inexact_inner(&sys, &cost, &cfg, &init(), &sched, k_fixed).unwrap().steady_error()
    };
    let worst_error = run(Direction::Given(worst));
    for seed in 0..5 {
        let random_error = run(Direction::Random { seed });
        assert!(worst_error >= random_error, "seed {seed}: {worst_error:e} < {random_error:e}");
    }
}

#[test]
fn disturbed_errors_follow_a_geometric_bound_with_quadratic_offset() {
    let (sys, cost) = (example_system(), example_cost());
    let cfg = DualLoopConfig::default();
    let (_, trace) = reference_solution(&sys, &cost, &cfg, &init()).unwrap();
    let k_fixed = default_inner_index(&trace);
    let mut runs = Vec::new();
    for magnitude in GRID {
        let sched = DisturbanceSchedule::fixed(magnitude, DisturbanceMode::PerInner);
        runs.push(run_inexact_inner(&sys, &cost, &cfg, &init(), &sched, k_fixed).unwrap());
    }
    let c_hat = RobustnessReport { runs: runs.clone() }.quadratic_coefficient().unwrap();
    assert!(c_hat.is_finite() && c_hat > 0.0);
    for run in &runs {
        // The offset is fitted from the whole sweep, so it only bounds the
        // tail up to the scatter of the quadratic law.
        let kappa = 2.0 * c_hat * run.magnitude * run.magnitude;
        let fit = fit_geometric_offset(&run.errors, kappa).unwrap();
        assert!(fit.alpha < 1.0, "magnitude {:e}: rate {}", run.magnitude, fit.alpha);
        assert!(fit.residual <= 1e-12, "magnitude {:e}: residual {:e}", run.magnitude, fit.residual);
    }
}

#[test]
fn unsorted_grids_are_rejected() {
    let (sys, cost) = (example_system(), example_cost());
    assert!(iss_sweep(&sys, &cost, &DualLoopConfig::default(), &init(), &[1e-2, 1e-3], Direction::AllOnes).is_err());
}
