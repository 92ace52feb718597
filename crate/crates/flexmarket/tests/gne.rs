mod common;

use approx::assert_abs_diff_eq;
use flexmarket::game::{self, ConsumerProfile, StepSizes};
use flexmarket::gne::{self, MarketSession, RunOptions, Termination};
use flexmarket::grid::{Direction, FeasibleSet};
use flexmarket::Error;

fn tight(tol: f64) -> RunOptions {
    RunOptions {
        stop_tol: tol,
        max_iter: 200_000,
        ..RunOptions::default()
    }
}

#[test]
fn symmetric_zero_cost_pair() {
    let set = FeasibleSet::without_network(vec![2, 3], 60.0);
    let ps = vec![
        ConsumerProfile::active(1, 2, 0.0, 0.0, 100.0),
        ConsumerProfile::active(2, 3, 0.0, 0.0, 100.0),
    ];
    let r = gne::run(&set, &ps, 5.0, &tight(1e-12), None).unwrap();
    assert!(r.converged());
    assert_abs_diff_eq!(r.beta[0], r.beta[1], epsilon = 1e-9);
    assert_abs_diff_eq!(r.x[0], 30.0, epsilon = 1e-6);
    assert_abs_diff_eq!(r.x[1], 30.0, epsilon = 1e-6);
}

fn check_run(set: &FeasibleSet, ps: &[ConsumerProfile], alpha: f64) -> gne::SolveReport {
    let r = gne::run(set, ps, alpha, &tight(1e-12), None).unwrap();
    assert_eq!(r.termination, Termination::Converged, "{} iterations", r.iterations);
    let gap = r.oracle_gap.unwrap();
    assert!(gap <= 1e-4, "oracle gap {gap}");
    assert_eq!(r.partition_violations, 0);
    assert!(r.max_balance_error <= 1e-10 * set.x_tot);
    for ((g, x), p) in r.gamma.iter().zip(&r.x).zip(ps) {
        assert!(*g >= 0.0);
        if *g > 1e-6 {
            assert!((x - p.x_hat).abs() <= 1e-4, "gamma {g} but x {x} vs cap {}", p.x_hat);
        }
    }
    let poa = r.poa.unwrap();
    assert!(poa.poa >= 1.0 - 1e-12 && poa.within_bound);
    r
}

#[test]
fn oracle_equivalence_without_network() {
    let ps = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 60.0),
        ConsumerProfile::active(2, 3, 0.003, 0.45, 80.0),
        ConsumerProfile::active(3, 4, 0.005, 0.40, 15.0),
        ConsumerProfile::active(4, 5, 0.0045, 0.38, 70.0),
    ];
    let set = FeasibleSet::without_network(vec![2, 3, 4, 5], 120.0);
    let alpha = game::alpha_from_delta(0.5, 0.005, 4).unwrap();
    let r = check_run(&set, &ps, alpha);
    // The small cap binds and carries a positive multiplier.
    assert_abs_diff_eq!(r.x[2], 15.0, epsilon = 1e-4);
    assert!(r.gamma[2] > 1e-6);
}

#[test]
fn oracle_equivalence_with_binding_network() {
    let ps = common::active(&common::feeder_consumers());
    let alpha = game::alpha_from_delta(0.5, 0.005, ps.len()).unwrap();
    let congested = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0, 1.0, 0.005]);
    let r = check_run(&congested, &ps, alpha);
    let free = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0; 3]);
    let base = check_run(&free, &ps, alpha);
    // Consumers behind the congested line supply less.
    assert!(r.x[2] + r.x[3] < base.x[2] + base.x[3] - 1.0);
    assert_abs_diff_eq!(r.x.iter().sum::<f64>(), 150.0, epsilon = 1e-9);

    let low_voltage = common::feeder_set(Direction::Surplus, 150.0, 0.985, [1.0; 3]);
    check_run(&low_voltage, &ps, alpha);
}

#[test]
fn fixed_point_after_convergence() {
    let ps = common::active(&common::feeder_consumers());
    let alpha = game::alpha_from_delta(0.5, 0.005, ps.len()).unwrap();
    let set = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0, 1.0, 0.005]);
    let opts = tight(1e-8);
    let mut s = MarketSession::new(&set, &ps, alpha, &opts).unwrap();
    let r = s.run(&opts, None).unwrap();
    assert!(r.converged());
    let extra = s.step().unwrap();
    assert!(extra.residual() <= opts.stop_tol);
    assert_eq!(s.log().violations.len(), 0);
}

#[test]
fn trace_lines_are_json() {
    let ps = common::active(&common::feeder_consumers());
    let set = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0; 3]);
    let alpha = game::alpha_from_delta(0.5, 0.005, ps.len()).unwrap();
    let mut buf: Vec<u8> = Vec::new();
    let r = gne::run(&set, &ps, alpha, &RunOptions::default(), Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), r.iterations);
    let last: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(last["k"], r.iterations);
    assert!(last["d_beta2"].as_f64().unwrap() + last["d_gamma2"].as_f64().unwrap() < 1e-5);
}

#[test]
fn rejects_bad_steps_and_alpha() {
    let ps = common::active(&common::feeder_consumers());
    let set = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0; 3]);
    let alpha = game::alpha_from_delta(0.5, 0.005, ps.len()).unwrap();
    let opts = RunOptions {
        steps: Some(StepSizes { rho: 10.0, nu: 10.0 }),
        ..RunOptions::default()
    };
    assert!(matches!(
        MarketSession::new(&set, &ps, alpha, &opts),
        Err(Error::GameCondition(_))
    ));
    let too_steep = 2.0 / (0.005 * 3.0);
    assert!(matches!(
        MarketSession::new(&set, &ps, too_steep, &RunOptions::default()),
        Err(Error::GameCondition(_))
    ));
}

#[test]
fn max_iter_reports_best_effort() {
    let ps = common::active(&common::feeder_consumers());
    let set = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0; 3]);
    let alpha = game::alpha_from_delta(0.5, 0.005, ps.len()).unwrap();
    let opts = RunOptions {
        max_iter: 5,
        stop_tol: 1e-30,
        ..RunOptions::default()
    };
    let r = gne::run(&set, &ps, alpha, &opts, None).unwrap();
    assert_eq!(r.termination, Termination::MaxIter);
    assert_eq!(r.iterations, 5);
    assert_eq!(r.residual_history.len(), 5);
    assert!(r.oracle_gap.is_none());
}

#[test]
fn projection_failure_is_reported() {
    let ps = common::active(&common::feeder_consumers());
    let set = common::feeder_set(Direction::Deficit, 150.0, 0.9, [0.01, 1.0, 1.0]);
    let alpha = game::alpha_from_delta(0.5, 0.005, ps.len()).unwrap();
    let r = gne::run(&set, &ps, alpha, &RunOptions::default(), None).unwrap();
    assert_eq!(r.termination, Termination::ProjectionFailure);
    assert!(r.failure.is_some());
}
