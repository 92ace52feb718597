use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;

use super::campaign::{self, SecurityComparison, SecurityRun, SweepCell};
use super::output::{ensure_dir, num, write_json, Table};
use super::scenario::Scenario;
use crate::error::{Error, Result};
use crate::game::{self, ConsumerProfile, PoaReport};
use crate::gne::{self, SolveReport, Termination};
use crate::grid::{state_for_allocation, PowerFlowState};
use crate::qpsolve::{self, Optimum};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Flags {
    pub no_network: bool,
    pub trace: bool,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub jobs: Option<usize>,
    pub out: PathBuf,
}

impl Flags {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            no_network: false,
            trace: false,
            seed: None,
            tol: None,
            max_iters: None,
            jobs: None,
            out: out.into(),
        }
    }

    fn network_enabled(&self, scenario: &Scenario) -> bool {
        scenario.config.network_enabled && !self.no_network
    }
}

fn active_rows(scenario: &Scenario) -> Vec<ConsumerProfile> {
    scenario.active_profiles()
}

fn write_allocation(
    flags: &Flags,
    profiles: &[ConsumerProfile],
    x: &[f64],
    beta: Option<&[f64]>,
    gamma: Option<&[f64]>,
) -> Result<()> {
    let mut t = Table::new(&["consumer", "bus", "x", "beta", "gamma"]);
    for (i, p) in profiles.iter().enumerate() {
        let opt = |v: Option<&[f64]>| v.map(|v| num(v[i])).unwrap_or_default();
        t.push(vec![p.id.to_string(), p.bus_id.to_string(), num(x[i]), opt(beta), opt(gamma)]);
    }
    t.write(&flags.out.join("allocation.csv"))
}

fn network_table(scenario: &Scenario, state: &PowerFlowState, run: Option<&str>) -> Table {
    const TOL: f64 = 1e-6;
    let mut header = vec!["element", "id", "v", "theta", "p", "q", "s", "lower", "upper", "violated"];
    if run.is_some() {
        header.insert(0, "run");
    }
    let mut t = Table::new(&header);
    let mut push = |mut row: Vec<String>| {
        if let Some(r) = run {
            row.insert(0, r.to_string());
        }
        t.push(row);
    };
    for (k, bus) in scenario.network.buses().iter().enumerate() {
        let v = state.v[k];
        let th = state.theta[k];
        let violated = v < bus.vmin - TOL || v > bus.vmax + TOL || th < bus.theta_min - TOL || th > bus.theta_max + TOL;
        push(vec![
            "bus".into(),
            bus.id.to_string(),
            num(v),
            num(th),
            String::new(),
            String::new(),
            String::new(),
            num(bus.vmin),
            num(bus.vmax),
            violated.to_string(),
        ]);
    }
    for (k, line) in scenario.network.lines().iter().enumerate() {
        let (p, q) = (state.p_lines[k], state.q_lines[k]);
        let s = p.hypot(q);
        push(vec![
            "line".into(),
            format!("{}-{}", line.from, line.to),
            String::new(),
            String::new(),
            num(p),
            num(q),
            num(s),
            String::new(),
            num(line.capacity),
            (s > line.capacity + TOL).to_string(),
        ]);
    }
    t
}

fn network_state(scenario: &Scenario, x: &[f64]) -> Result<PowerFlowState> {
    state_for_allocation(&scenario.network, &scenario.consumers, x, scenario.config.direction, scenario.config.base())
}

fn write_network_state(scenario: &Scenario, flags: &Flags, x: &[f64]) -> Result<()> {
    let state = network_state(scenario, x)?;
    network_table(scenario, &state, None).write(&flags.out.join("network_state.csv"))
}

/// Runs the market iteration and writes `report.json`, `allocation.csv`,
/// `network_state.csv` and, with `--trace`, `trace.jsonl`.
pub fn cmd_solve(scenario: &Scenario, flags: &Flags) -> Result<SolveReport> {
    ensure_dir(&flags.out)?;
    let set = scenario.feasible_set(flags.network_enabled(scenario))?;
    let profiles = active_rows(scenario);
    let options = scenario.run_options(flags.tol, flags.max_iters);
    let report = if flags.trace {
        let mut w = BufWriter::new(File::create(flags.out.join("trace.jsonl"))?);
        let r = gne::run(&set, &profiles, scenario.alpha()?, &options, Some(&mut w))?;
        w.flush()?;
        r
    } else {
        gne::run(&set, &profiles, scenario.alpha()?, &options, None)?
    };
    write_json(&flags.out.join("report.json"), &report)?;
    write_allocation(flags, &profiles, &report.x, Some(&report.beta), Some(&report.gamma))?;
    write_network_state(scenario, flags, &report.x)?;
    match report.termination {
        Termination::Converged => Ok(report),
        Termination::ProjectionFailure => Err(Error::Solver {
            block: "network projection".into(),
            detail: report.failure.clone().unwrap_or_default(),
        }),
        Termination::MaxIter => Err(Error::Solver {
            block: "equilibrium iteration".into(),
            detail: format!(
                "no convergence within {} iterations (residual {})",
                report.iterations,
                num(report.final_residual)
            ),
        }),
    }
}

#[derive(Debug, Serialize)]
struct OptimumReport<'a> {
    problem: &'a str,
    network_enabled: bool,
    alpha: Option<f64>,
    consumer_ids: Vec<u32>,
    x: &'a [f64],
    objective: f64,
    total_cost: f64,
    /// Marginal price of the balance constraint.
    price: f64,
    iterations: usize,
    kkt: &'a qpsolve::Kkt,
    polished: bool,
}

fn balance_price(opt: &Optimum) -> f64 {
    let duals = &opt.solution.eq_dual;
    -duals[duals.len() - 1]
}

fn write_optimum(scenario: &Scenario, flags: &Flags, problem: &str, alpha: Option<f64>, opt: &Optimum) -> Result<()> {
    let profiles = active_rows(scenario);
    let report = OptimumReport {
        problem,
        network_enabled: flags.network_enabled(scenario),
        alpha,
        consumer_ids: profiles.iter().map(|p| p.id).collect(),
        x: &opt.x,
        objective: opt.objective,
        total_cost: opt.total_cost,
        price: balance_price(opt),
        iterations: opt.solution.iterations,
        kkt: &opt.solution.kkt,
        polished: opt.solution.polished,
    };
    write_json(&flags.out.join("report.json"), &report)?;
    write_allocation(flags, &profiles, &opt.x, None, None)?;
    write_network_state(scenario, flags, &opt.x)
}

/// Solves the social-welfare problem.
pub fn cmd_welfare(scenario: &Scenario, flags: &Flags) -> Result<Optimum> {
    ensure_dir(&flags.out)?;
    let set = scenario.feasible_set(flags.network_enabled(scenario))?;
    let opt = qpsolve::solve_welfare(&set, &active_rows(scenario))?;
    write_optimum(scenario, flags, "welfare", None, &opt)?;
    Ok(opt)
}

/// Solves the shadow problem whose optimum is the equilibrium allocation.
pub fn cmd_shadow(scenario: &Scenario, flags: &Flags) -> Result<Optimum> {
    ensure_dir(&flags.out)?;
    let set = scenario.feasible_set(flags.network_enabled(scenario))?;
    let alpha = scenario.alpha()?;
    let opt = qpsolve::solve_shadow(&set, &active_rows(scenario), alpha)?;
    write_optimum(scenario, flags, "shadow", Some(alpha), &opt)?;
    Ok(opt)
}

#[derive(Debug, Clone, Serialize)]
pub struct PoaRow {
    pub network_enabled: bool,
    pub alpha: f64,
    pub report: PoaReport,
}

/// Computes the price of anarchy and its bound with and without the network
/// rows, writing `poa.csv`.
pub fn cmd_poa(scenario: &Scenario, flags: &Flags) -> Result<Vec<PoaRow>> {
    ensure_dir(&flags.out)?;
    let profiles = active_rows(scenario);
    let alpha = scenario.alpha()?;
    let modes: Vec<bool> = if flags.network_enabled(scenario) { vec![true, false] } else { vec![false] };
    let mut rows = Vec::new();
    let mut t = Table::new(&["network_enabled", "alpha", "cost_equilibrium", "cost_optimum", "poa", "bound", "within_bound"]);
    for network in modes {
        let set = scenario.feasible_set(network)?;
        let shadow = qpsolve::solve_shadow(&set, &profiles, alpha)?;
        let welfare = qpsolve::solve_welfare(&set, &profiles)?;
        let report = game::price_of_anarchy(&profiles, &shadow.x, &welfare.x, alpha)?;
        t.push(vec![
            network.to_string(),
            num(alpha),
            num(report.cost_equilibrium),
            num(report.cost_optimum),
            num(report.poa),
            num(report.bound),
            report.within_bound.to_string(),
        ]);
        rows.push(PoaRow {
            network_enabled: network,
            alpha,
            report,
        });
    }
    t.write(&flags.out.join("poa.csv"))?;
    Ok(rows)
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn status(cell: &SweepCell) -> String {
    match (&cell.error, cell.converged) {
        (Some(e), _) => format!("failed: {e}"),
        (None, true) => "converged".into(),
        (None, false) => "max_iter".into(),
    }
}

/// Runs the efficiency / convergence campaign described by the scenario's
/// `sweep` block and writes `sweep_prices.csv`, `sweep_poa.csv` and
/// `sweep_iters.csv`.
pub fn cmd_sweep(scenario: &Scenario, flags: &Flags) -> Result<Vec<SweepCell>> {
    ensure_dir(&flags.out)?;
    let mut spec = scenario.config.sweep.clone().unwrap_or_default();
    if flags.no_network {
        spec.network_enabled = false;
    }
    if let Some(tol) = flags.tol {
        spec.stop_tol = tol;
    }
    let seed = flags.seed.unwrap_or(scenario.config.seed);
    let max_iter = flags.max_iters.unwrap_or(scenario.config.max_iter);
    let jobs = flags.jobs.unwrap_or_else(rayon::current_num_threads);
    let cells = campaign::run_sweep(scenario, &spec, seed, max_iter, jobs)?;

    let mut prices = Table::new(&["n", "delta", "alpha", "price", "equilibrium_price", "welfare_price", "status"]);
    let mut poa = Table::new(&["n", "delta", "alpha", "cost_equilibrium", "cost_optimum", "poa", "bound", "within_bound", "status"]);
    let mut iters = Table::new(&["n", "delta", "alpha", "iterations", "final_residual", "oracle_gap", "status"]);
    for c in &cells {
        let key = [c.n.to_string(), num(c.delta), num(c.alpha)];
        let st = status(c);
        prices.push([&key[..], &[num(c.price), num(c.equilibrium_price), num(c.welfare_price), st.clone()]].concat());
        let p = c.poa.as_ref();
        poa.push(
            [
                &key[..],
                &[
                    opt_num(p.map(|p| p.cost_equilibrium)),
                    opt_num(p.map(|p| p.cost_optimum)),
                    opt_num(p.map(|p| p.poa)),
                    opt_num(p.map(|p| p.bound)),
                    p.map(|p| p.within_bound.to_string()).unwrap_or_default(),
                    st.clone(),
                ],
            ]
            .concat(),
        );
        iters.push([&key[..], &[c.iterations.to_string(), num(c.final_residual), opt_num(c.oracle_gap), st]].concat());
    }
    prices.write(&flags.out.join("sweep_prices.csv"))?;
    poa.write(&flags.out.join("sweep_poa.csv"))?;
    iters.write(&flags.out.join("sweep_iters.csv"))?;
    Ok(cells)
}

/// Solves with and without the network rows and writes
/// `security_compare.csv` and `security_summary.json`.
pub fn cmd_security(scenario: &Scenario, flags: &Flags) -> Result<SecurityComparison> {
    ensure_dir(&flags.out)?;
    let options = scenario.run_options(flags.tol, flags.max_iters);
    let cmp = campaign::security_compare(scenario, &options)?;
    let mut table = network_table(scenario, &cmp.constrained.state, Some("constrained"));
    table.rows.extend(network_table(scenario, &cmp.unconstrained.state, Some("unconstrained")).rows);
    table.write(&flags.out.join("security_compare.csv"))?;

    #[derive(Serialize)]
    struct Summary {
        run: &'static str,
        worst_voltage_violation: f64,
        worst_line_violation: f64,
        balance_error: f64,
        iterations: usize,
        lambda: f64,
        oracle_gap: Option<f64>,
    }
    let summary = |name: &'static str, r: &SecurityRun| Summary {
        run: name,
        worst_voltage_violation: r.worst_voltage_violation,
        worst_line_violation: r.worst_line_violation,
        balance_error: r.balance_error,
        iterations: r.report.iterations,
        lambda: r.report.lambda,
        oracle_gap: r.report.oracle_gap,
    };
    write_json(
        &flags.out.join("security_summary.json"),
        &[summary("constrained", &cmp.constrained), summary("unconstrained", &cmp.unconstrained)],
    )?;
    Ok(cmp)
}

/// Summary of a loaded scenario.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationSummary {
    pub buses: usize,
    pub lines: usize,
    pub load_buses: usize,
    pub active_consumers: usize,
    pub passive_consumers: usize,
    pub alpha: f64,
    pub alpha_limit: f64,
    pub constants: game::GameConstants,
    pub steps: game::StepSizes,
    pub base_state_max_violation: f64,
}

/// Summarises a scenario that has already passed loading; nothing is solved.
pub fn cmd_validate(scenario: &Scenario) -> Result<ValidationSummary> {
    let profiles = active_rows(scenario);
    let constants = scenario.constants()?;
    let steps = match scenario.run_options(None, None).steps {
        Some(s) => s,
        None => game::max_step_sizes(&constants)?,
    };
    let zero = vec![0.0; profiles.len()];
    let base = network_state(scenario, &zero)?;
    let load_buses = {
        let mut b: Vec<usize> = scenario.consumers.iter().map(|c| c.bus_id).collect();
        b.sort_unstable();
        b.dedup();
        b.len()
    };
    let summary = ValidationSummary {
        buses: scenario.network.bus_count(),
        lines: scenario.network.line_count(),
        load_buses,
        active_consumers: profiles.len(),
        passive_consumers: scenario.consumers.len() - profiles.len(),
        alpha: constants.alpha,
        alpha_limit: game::alpha_limit(constants.kappa, constants.n),
        constants,
        steps,
        base_state_max_violation: base.max_violation(&scenario.network),
    };
    Ok(summary)
}
