use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::scenario::{Scenario, SweepSpec};
use crate::error::{Error, Result};
use crate::game::{self, ConsumerProfile, PoaReport};
use crate::gne::{self, RunOptions, SolveReport};
use crate::grid::{
    assemble_feasible_set, state_for_allocation, FeasibleSet, MarketSetup, PowerFlowState,
};
use crate::qpsolve;

/// Draws `n` active consumers with `a ~ U[0.003, 0.005]`,
/// `b_lin ~ U[0.35, 0.45]` and `x_hat ~ U[lo, hi] x_tot / n`, attached to
/// buses drawn from `buses`.
pub fn draw_consumers(
    n: usize,
    x_tot: f64,
    cap_range: [f64; 2],
    buses: &[usize],
    rng: &mut impl Rng,
) -> Vec<ConsumerProfile> {
    (0..n)
        .map(|k| {
            let a = rng.gen_range(0.003..=0.005);
            let b = rng.gen_range(0.35..=0.45);
            let x_hat = rng.gen_range(cap_range[0]..=cap_range[1]) * x_tot / n as f64;
            let bus = buses[rng.gen_range(0..buses.len())];
            ConsumerProfile::active(k as u32 + 1, bus, a, b, x_hat)
        })
        .collect()
}

/// One cell of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub n: usize,
    pub delta: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
    /// Clearing price reached by the market iteration.
    pub price: f64,
    /// Balance multiplier of the shadow problem (exact equilibrium price).
    pub equilibrium_price: f64,
    /// Marginal cost at the welfare optimum.
    pub welfare_price: f64,
    /// Efficiency of the exact equilibrium (shadow-problem solution).
    pub poa: Option<PoaReport>,
    pub oracle_gap: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(
    n: usize,
    delta: f64,
    spec: &SweepSpec,
    scenario: &Scenario,
    seed: u64,
    max_iter: usize,
) -> Result<SweepCell> {
    let x_tot = spec.x_tot.unwrap_or(scenario.config.x_tot);
    // Same draw for every delta at a given N.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let buses: Vec<usize> = (2..=scenario.network.bus_count()).collect();
    let active = draw_consumers(n, x_tot, spec.x_hat_range, &buses, &mut rng);
    let set: FeasibleSet = if spec.network_enabled {
        let mut all = active.clone();
        all.extend(scenario.consumers.iter().filter(|c| !c.active).cloned());
        let setup = MarketSetup {
            x_tot,
            ..scenario.setup(true)
        };
        assemble_feasible_set(&scenario.network, &all, &setup)?
    } else {
        FeasibleSet::without_network(active.iter().map(|c| c.bus_id).collect(), x_tot)
    };
    let kappa = spec.kappa.unwrap_or_else(|| game::curvature_bound(&active));
    let alpha = game::alpha_from_delta(delta, kappa, n)?;
    let options = RunOptions {
        stop_tol: spec.stop_tol,
        max_iter,
        kappa: Some(kappa),
        ..RunOptions::default()
    };
    let mut session = gne::MarketSession::new(&set, &active, alpha, &options)?;
    let report = session.run(&options, None)?;
    let shadow = qpsolve::solve_shadow(&set, &active, alpha)?;
    let welfare = qpsolve::solve_welfare(&set, &active)?;
    let poa = game::price_of_anarchy(&active, &shadow.x, &welfare.x, alpha)?;
    let balance = |o: &qpsolve::Optimum| -o.solution.eq_dual[o.solution.eq_dual.len() - 1];
    Ok(SweepCell {
        n,
        delta,
        alpha,
        iterations: report.iterations,
        converged: report.converged(),
        final_residual: report.final_residual,
        price: report.lambda,
        equilibrium_price: balance(&shadow),
        welfare_price: balance(&welfare),
        poa: Some(poa),
        oracle_gap: Some(gap(&report.x, &shadow.x)),
        error: report.failure,
    })
}

fn gap(x: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Runs every `(N, delta)` cell of `spec`, in parallel on up to `jobs`
/// threads. Failing cells are kept with their error message.
pub fn run_sweep(scenario: &Scenario, spec: &SweepSpec, seed: u64, max_iter: usize, jobs: usize) -> Result<Vec<SweepCell>> {
    if spec.n_values.is_empty() || spec.delta_values.is_empty() {
        return Err(Error::Schema("sweep grid is empty".into()));
    }
    let [lo, hi] = spec.x_hat_range;
    if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Schema(format!("x_hat_range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]")));
    }
    if let Some(x) = spec.x_tot {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Schema(format!("sweep x_tot must be positive, got {x}")));
        }
    }
    if let Some(&n) = spec.n_values.iter().find(|&&n| n < 2) {
        return Err(Error::GameCondition(format!("sweep needs N >= 2, got {n}")));
    }
    for &d in &spec.delta_values {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::GameCondition(format!("delta must lie in (0, 1), got {d}")));
        }
    }
    let cells: Vec<(usize, f64)> = spec
        .n_values
        .iter()
        .flat_map(|&n| spec.delta_values.iter().map(move |&d| (n, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Solver {
            block: "sweep".into(),
            detail: e.to_string(),
        })?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(n, delta)| {
                run_cell(n, delta, spec, scenario, seed, max_iter).unwrap_or_else(|e| SweepCell {
                    n,
                    delta,
                    alpha: f64::NAN,
                    iterations: 0,
                    converged: false,
                    final_residual: f64::NAN,
                    price: f64::NAN,
                    equilibrium_price: f64::NAN,
                    welfare_price: f64::NAN,
                    poa: None,
                    oracle_gap: None,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    }))
}

/// Outcome of one market run in a security comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SecurityRun {
    pub network_enabled: bool,
    pub report: SolveReport,
    pub state: PowerFlowState,
    /// Largest `vmin - v` or `v - vmax` over all buses (negative when secure).
    pub worst_voltage_violation: f64,
    /// Largest `|S| - z` over all lines (negative when secure).
    pub worst_line_violation: f64,
    pub balance_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SecurityComparison {
    pub constrained: SecurityRun,
    pub unconstrained: SecurityRun,
}

fn security_run(scenario: &Scenario, network_enabled: bool, options: &RunOptions) -> Result<SecurityRun> {
    let set = scenario.feasible_set(network_enabled)?;
    let active = scenario.active_profiles();
    let report = gne::run(&set, &active, scenario.alpha()?, options, None)?;
    if !report.converged() {
        return Err(Error::Solver {
            block: "equilibrium iteration".into(),
            detail: format!("{:?} after {} iterations", report.termination, report.iterations),
        });
    }
    let net = &scenario.network;
    let state = state_for_allocation(net, &scenario.consumers, &report.x, scenario.config.direction, scenario.config.base())?;
    let worst_voltage_violation = net
        .buses()
        .iter()
        .zip(&state.v)
        .skip(1)
        .map(|(b, v)| (b.vmin - v).max(v - b.vmax))
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_line_violation = net
        .lines()
        .iter()
        .zip(state.p_lines.iter().zip(&state.q_lines))
        .map(|(l, (p, q))| p.hypot(*q) - l.capacity)
        .fold(f64::NEG_INFINITY, f64::max);
    let balance_error = (report.x.iter().sum::<f64>() - scenario.config.x_tot).abs();
    Ok(SecurityRun {
        network_enabled,
        report,
        state,
        worst_voltage_violation,
        worst_line_violation,
        balance_error,
    })
}

/// Solves the scenario with and without the network rows and evaluates the
/// resulting network states.
pub fn security_compare(scenario: &Scenario, options: &RunOptions) -> Result<SecurityComparison> {
    Ok(SecurityComparison {
        constrained: security_run(scenario, true, options)?,
        unconstrained: security_run(scenario, false, options)?,
    })
}
