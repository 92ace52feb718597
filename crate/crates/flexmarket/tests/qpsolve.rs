mod common;

use approx::assert_abs_diff_eq;
use flexmarket::game::ConsumerProfile;
use flexmarket::grid::{Direction, FeasibleSet};
use flexmarket::qpsolve::{
    self, project_onto_psi, solve_shadow, solve_welfare, ConvexProgram, Disk, PsiProjector,
    Settings, Solution, Status,
};
use flexmarket::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_certified(sol: &Solution) {
    assert_eq!(sol.status, Status::Optimal, "{:?} {:?} it={}", sol.primal_residual, sol.dual_residual, sol.iterations);
    assert!(sol.primal_residual <= 1e-8, "primal residual {}", sol.primal_residual);
    assert!(sol.dual_residual <= 1e-8, "dual residual {}", sol.dual_residual);
    assert!(sol.kkt.primal <= 1e-6, "{:?}", sol.kkt);
    assert!(sol.kkt.stationarity <= 1e-6, "{:?}", sol.kkt);
    assert!(sol.kkt.complementarity <= 1e-6, "{:?}", sol.kkt);
}

fn distance_program(c: &[f64]) -> ConvexProgram {
    let n = c.len();
    let mut p = ConvexProgram::new(n);
    p.quad = DMatrix::identity(n, n);
    p.linear = -DVector::from_column_slice(c);
    p.constant = 0.5 * c.iter().map(|v| v * v).sum::<f64>();
    p
}

#[test]
fn unconstrained_quadratic() {
    let prog = distance_program(&[1.5, -2.0, 7.0]);
    let sol = qpsolve::solve(&prog, &Settings::default()).unwrap();
    assert_certified(&sol);
    for (y, c) in sol.primal.iter().zip([1.5, -2.0, 7.0]) {
        assert_abs_diff_eq!(*y, c, epsilon = 1e-10);
    }
}

#[test]
fn active_box() {
    let mut prog = distance_program(&[2.0]);
    prog.upper[0] = 1.0;
    let sol = qpsolve::solve(&prog, &Settings::default()).unwrap();
    assert_certified(&sol);
    assert_abs_diff_eq!(sol.primal[0], 1.0, epsilon = 1e-10);
    assert!(sol.box_dual[0] > 0.0);
    assert_abs_diff_eq!(sol.box_dual[0], 1.0, epsilon = 1e-8);
}

#[test]
fn radial_disk_projection() {
    let mut prog = distance_program(&[3.0, 4.0]);
    prog.disks.push(Disk { i: 0, j: 1, radius: 4.0 });
    let sol = qpsolve::solve(&prog, &Settings::default()).unwrap();
    assert_certified(&sol);
    assert_abs_diff_eq!(sol.primal[0], 2.4, epsilon = 1e-10);
    assert_abs_diff_eq!(sol.primal[1], 3.2, epsilon = 1e-10);
    // Stationarity: y - c + mu y = 0 gives mu = 0.25.
    assert_abs_diff_eq!(sol.disk_dual[0], 0.25, epsilon = 1e-8);
}

#[test]
fn disk_with_equality() {
    // min (y0 - 3)^2/2 + (y1 - 3)^2/2 + y2^2/2 s.t. y0 - y2 = 0, disk on (y0, y1).
    let mut prog = distance_program(&[3.0, 3.0, 0.0]);
    prog.eq_matrix = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]);
    prog.eq_rhs = DVector::from_element(1, 0.0);
    prog.disks.push(Disk { i: 0, j: 1, radius: 2.0 });
    let sol = qpsolve::solve(&prog, &Settings::default()).unwrap();
    assert_certified(&sol);
    let y = &sol.primal;
    assert_abs_diff_eq!(y[0] * y[0] + y[1] * y[1], 4.0, epsilon = 1e-9);
    assert_abs_diff_eq!(y[0], y[2], epsilon = 1e-12);
}

#[test]
fn inconsistent_equalities_are_infeasible() {
    let mut prog = distance_program(&[0.0, 0.0]);
    prog.eq_matrix = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
    prog.eq_rhs = DVector::from_column_slice(&[1.0, 3.0]);
    let sol = qpsolve::solve(&prog, &Settings::default()).unwrap();
    assert_eq!(sol.status, Status::Infeasible);
}

#[test]
fn empty_intersection_is_infeasible() {
    // y0 + y1 = 10 with both in [0, 2].
    let mut prog = distance_program(&[1.0, 1.0]);
    prog.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    prog.eq_rhs = DVector::from_element(1, 10.0);
    prog.lower = DVector::zeros(2);
    prog.upper = DVector::from_element(2, 2.0);
    let sol = qpsolve::solve(&prog, &Settings::default()).unwrap();
    assert_eq!(sol.status, Status::Infeasible);
}

#[test]
fn invalid_programs_rejected() {
    let mut prog = distance_program(&[1.0, 1.0]);
    prog.quad[(0, 0)] = -1.0;
    assert!(qpsolve::solve(&prog, &Settings::default()).is_err());
    let mut prog = distance_program(&[1.0, 1.0]);
    prog.lower[0] = 0.0;
    prog.disks.push(Disk { i: 0, j: 1, radius: 1.0 });
    assert!(qpsolve::solve(&prog, &Settings::default()).is_err());
}

fn no_network(n: usize, x_tot: f64) -> FeasibleSet {
    FeasibleSet::without_network((2..2 + n).collect(), x_tot)
}

#[test]
fn welfare_hand_kkt() {
    let set = no_network(2, 100.0);
    let ps = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 1000.0),
        ConsumerProfile::active(2, 3, 0.004, 0.45, 1000.0),
    ];
    let opt = solve_welfare(&set, &ps).unwrap();
    assert_certified(&opt.solution);
    assert_abs_diff_eq!(opt.x[0], 62.5, epsilon = 1e-8);
    assert_abs_diff_eq!(opt.x[1], 37.5, epsilon = 1e-8);

    let mut capped = ps.clone();
    capped[0].x_hat = 50.0;
    let opt = solve_welfare(&set, &capped).unwrap();
    assert_certified(&opt.solution);
    assert_abs_diff_eq!(opt.x[0], 50.0, epsilon = 1e-8);
    assert_abs_diff_eq!(opt.x[1], 50.0, epsilon = 1e-8);

    let same = vec![ps[0].clone(), ConsumerProfile { id: 2, bus_id: 3, ..ps[0].clone() }];
    let opt = solve_welfare(&set, &same).unwrap();
    assert_abs_diff_eq!(opt.x[0], 50.0, epsilon = 1e-8);
    assert_abs_diff_eq!(opt.x[1], 50.0, epsilon = 1e-8);
}

#[test]
fn welfare_caps_precheck() {
    let set = no_network(2, 100.0);
    let ps = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 30.0),
        ConsumerProfile::active(2, 3, 0.004, 0.45, 30.0),
    ];
    match solve_welfare(&set, &ps) {
        Err(Error::Infeasible { block }) => assert!(block.contains("caps")),
        other => panic!("expected infeasible caps, got {other:?}"),
    }
}

#[test]
fn shadow_hand_kkt() {
    let set = no_network(3, 120.0);
    let ps = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 1000.0),
        ConsumerProfile::active(2, 3, 0.003, 0.45, 1000.0),
        ConsumerProfile::active(3, 4, 0.005, 0.40, 1000.0),
    ];
    let alpha = 50.0;
    let m = 1.0 / (alpha * 2.0);
    // Equal marginal shadow cost mu: x_n = (mu - b_n) / (a_n + m), sum = x_tot.
    let inv: f64 = ps.iter().map(|p| 1.0 / (p.a + m)).sum();
    let weighted: f64 = ps.iter().map(|p| p.b_lin / (p.a + m)).sum();
    let mu = (120.0 + weighted) / inv;
    let opt = solve_shadow(&set, &ps, alpha).unwrap();
    assert_certified(&opt.solution);
    for (x, p) in opt.x.iter().zip(&ps) {
        let expected = (mu - p.b_lin) / (p.a + m);
        assert!(expected > 0.0);
        assert_abs_diff_eq!(*x, expected, epsilon = 1e-6 * expected);
    }
}

#[test]
fn shadow_tends_to_welfare() {
    let set = no_network(3, 120.0);
    let ps = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 1000.0),
        ConsumerProfile::active(2, 3, 0.003, 0.45, 1000.0),
        ConsumerProfile::active(3, 4, 0.005, 0.40, 1000.0),
    ];
    let welfare = solve_welfare(&set, &ps).unwrap().x;
    let mut prev = f64::INFINITY;
    for alpha in [10.0, 100.0, 1000.0, 10000.0] {
        let shadow = solve_shadow(&set, &ps, alpha).unwrap().x;
        let gap = shadow.iter().zip(&welfare).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < prev);
        // Gap scales like 1 / (alpha (N - 1)).
        assert!(gap * alpha * 2.0 < 5e4, "alpha {alpha}: gap {gap}");
        prev = gap;
    }
}

#[test]
fn shadow_symmetric_equals_welfare() {
    let set = no_network(2, 80.0);
    let p = ConsumerProfile::active(1, 2, 0.004, 0.4, 1000.0);
    let ps = vec![p.clone(), ConsumerProfile { id: 2, bus_id: 3, ..p }];
    let w = solve_welfare(&set, &ps).unwrap().x;
    let s = solve_shadow(&set, &ps, 3.0).unwrap().x;
    for (a, b) in w.iter().zip(&s) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        assert_abs_diff_eq!(*a, 40.0, epsilon = 1e-9);
    }
}

/// Projection onto `{x >= 0, sum x = x_tot}` by enumerating active sets.
fn brute_force_simplex(x_tilde: &[f64], x_tot: f64) -> Vec<f64> {
    let n = x_tilde.len();
    for mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
        if free.is_empty() {
            continue;
        }
        let shift = (x_tot - free.iter().map(|&i| x_tilde[i]).sum::<f64>()) / free.len() as f64;
        let x: Vec<f64> = (0..n)
            .map(|i| if mask & (1 << i) == 0 { x_tilde[i] + shift } else { 0.0 })
            .collect();
        let primal = x.iter().all(|&v| v >= -1e-12);
        let dual = (0..n).filter(|i| mask & (1 << i) != 0).all(|i| x_tilde[i] + shift <= 1e-12);
        if primal && dual {
            return x;
        }
    }
    unreachable!("the simplex projection always exists")
}

#[test]
fn two_bus_projection_matches_brute_force() {
    use flexmarket::grid::{assemble_feasible_set, DistributionNetwork, MarketSetup, PowerBase};
    let net = DistributionNetwork::new(
        vec![common::bus(1, 0.5, 1.5), common::bus(2, 0.5, 1.5)],
        vec![common::line(1, 2, 0.01, 0.01, 1e6)],
    )
    .unwrap();
    let cons = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 100.0),
        ConsumerProfile::active(2, 2, 0.004, 0.40, 100.0),
        ConsumerProfile::active(3, 2, 0.004, 0.45, 100.0),
    ];
    let setup = MarketSetup {
        x_tot: 30.0,
        direction: Direction::Deficit,
        base: PowerBase::default(),
        network_enabled: true,
    };
    let set = assemble_feasible_set(&net, &cons, &setup).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut proj = PsiProjector::new(&set).unwrap();
    for _ in 0..50 {
        let bt: Vec<f64> = (0..3).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let mean = bt.iter().sum::<f64>() / 3.0;
        let xt: Vec<f64> = bt.iter().map(|b| b - mean + 10.0).collect();
        let x = brute_force_simplex(&xt, 30.0);
        let expected: Vec<f64> = x.iter().map(|v| v - 10.0 + mean).collect();
        let got = proj.project(&bt).unwrap();
        assert_certified(proj.last_solution().unwrap());
        for (g, e) in got.iter().zip(&expected) {
            assert_abs_diff_eq!(*g, *e, epsilon = 1e-8);
        }
    }
}

fn network_projection_pairs(set: &FeasibleSet, seed: u64, pairs: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = PsiProjector::new(set).unwrap();
    let n = set.active_count();
    for _ in 0..pairs {
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-150.0..150.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-150.0..150.0)).collect();
        let pu = proj.project(&u).unwrap();
        assert_certified(proj.last_solution().unwrap());
        let pv = proj.project(&v).unwrap();
        assert_certified(proj.last_solution().unwrap());
        let mut d2 = 0.0;
        let mut inner = 0.0;
        let mut in2 = 0.0;
        for k in 0..n {
            let dp = pu[k] - pv[k];
            d2 += dp * dp;
            inner += (u[k] - v[k]) * dp;
            in2 += (u[k] - v[k]) * (u[k] - v[k]);
        }
        assert!(d2 <= inner + 1e-8, "firm nonexpansiveness: {d2} > {inner}");
        assert!(d2.sqrt() <= in2.sqrt() + 1e-9);
        let again = proj.project(&pu).unwrap();
        let idem = again.iter().zip(&pu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let s = proj.last_solution().unwrap();
        assert!(idem <= 1e-7, "idempotence error {idem} polished={} it={} {:?}", s.polished, s.iterations, s.kkt);
    }
}

#[test]
fn projection_properties_with_binding_network() {
    // Tight voltage floor in surplus mode and a tight end line in deficit mode.
    let surplus = common::feeder_set(Direction::Surplus, 150.0, 0.985, [1.0; 3]);
    network_projection_pairs(&surplus, 5, 40);
    let deficit = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0, 1.0, 0.005]);
    network_projection_pairs(&deficit, 6, 40);
}

#[test]
fn network_limits_bind_in_feeder() {
    let ps = common::active(&common::feeder_consumers());
    let loose = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0; 3]);
    let tight = common::feeder_set(Direction::Deficit, 150.0, 0.9, [1.0, 1.0, 0.005]);
    let a = solve_welfare(&loose, &ps).unwrap();
    let b = solve_welfare(&tight, &ps).unwrap();
    assert_certified(&b.solution);
    // Consumers behind the tight end line lose allocation.
    assert!(b.x[2] + b.x[3] < a.x[2] + a.x[3] - 1.0);
    assert_abs_diff_eq!(b.x.iter().sum::<f64>(), 150.0, epsilon = 1e-9);
    let dual = b.solution.disk_dual.iter().cloned().fold(0.0, f64::max);
    assert!(dual > 0.0);
}

#[test]
fn network_infeasibility_names_block() {
    let ps = common::active(&common::feeder_consumers());
    let set = common::feeder_set(Direction::Deficit, 150.0, 0.9, [0.01, 1.0, 1.0]);
    match solve_welfare(&set, &ps) {
        Err(Error::Infeasible { block }) => assert!(block.contains("line"), "{block}"),
        other => panic!("expected infeasibility, got {other:?}"),
    }
    let set = common::feeder_set(Direction::Surplus, 150.0, 0.9999, [1.0; 3]);
    match solve_welfare(&set, &ps) {
        Err(Error::Infeasible { block }) => assert!(block.contains("voltage"), "{block}"),
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn one_shot_projection_is_feasible() {
    let set = no_network(4, 10.0);
    let b = project_onto_psi(&[100.0, -100.0, 0.0, 0.0], &set).unwrap();
    let mean = b.iter().sum::<f64>() / 4.0;
    let x: Vec<f64> = b.iter().map(|v| v - mean + 2.5).collect();
    assert!(x.iter().all(|&v| v >= -1e-10));
    assert_abs_diff_eq!(x.iter().sum::<f64>(), 10.0, epsilon = 1e-10);
}
