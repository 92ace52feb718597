//! Scenario ingestion, experiment campaigns and report emission behind the
//! `flexmarket` binary.

mod campaign;
mod commands;
mod output;
mod scenario;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use campaign::{draw_consumers, run_sweep, security_compare, SecurityComparison, SecurityRun, SweepCell};
pub use commands::{
    cmd_poa, cmd_security, cmd_shadow, cmd_solve, cmd_sweep, cmd_validate, cmd_welfare, Flags, PoaRow,
    ValidationSummary,
};
pub use output::{num, write_json, Table};
pub use scenario::{load_consumers, load_network, MarketScenario, Scenario, SweepSpec};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "flexmarket", version, about = "Flexibility market simulator for distribution networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario directory with scenario.json, buses.csv, lines.csv and consumers.csv.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Drop the network rows from the feasible set.
    #[arg(long, global = true)]
    pub no_network: bool,
    /// Write per-iteration records to trace.jsonl.
    #[arg(long, global = true)]
    pub trace: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stopping tolerance of the market iteration.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the market iteration to equilibrium.
    Solve,
    /// Solve the social-welfare problem.
    Welfare,
    /// Solve the shadow problem (centralised equilibrium oracle).
    Shadow,
    /// Price of anarchy and its bound.
    Poa,
    /// Seeded campaign over N and delta.
    Sweep,
    /// Compare runs with and without network constraints.
    Security,
    /// Load and check a scenario without solving.
    Validate,
}

impl Cli {
    pub fn flags(&self) -> Flags {
        Flags {
            no_network: self.no_network,
            trace: self.trace,
            seed: self.seed,
            tol: self.tol,
            max_iters: self.max_iters,
            jobs: self.jobs,
            out: self.out.clone(),
        }
    }
}

/// Runs one command and returns a one-line summary for stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let dir = cli
        .scenario
        .as_ref()
        .ok_or_else(|| crate::Error::Schema("--scenario DIR is required".into()))?;
    let scenario = Scenario::load(dir)?;
    let flags = cli.flags();
    let out = flags.out.display();
    Ok(match cli.command {
        Command::Solve => {
            let r = cmd_solve(&scenario, &flags)?;
            format!(
                "converged in {} iterations, lambda = {}, oracle gap = {}; wrote {out}",
                r.iterations,
                num(r.lambda),
                r.oracle_gap.map(num).unwrap_or_else(|| "n/a".into())
            )
        }
        Command::Welfare => {
            let o = cmd_welfare(&scenario, &flags)?;
            format!("welfare optimum: total cost = {}; wrote {out}", num(o.total_cost))
        }
        Command::Shadow => {
            let o = cmd_shadow(&scenario, &flags)?;
            format!("shadow optimum: total cost = {}; wrote {out}", num(o.total_cost))
        }
        Command::Poa => {
            let rows = cmd_poa(&scenario, &flags)?;
            let parts: Vec<String> = rows
                .iter()
                .map(|r| {
                    format!(
                        "network={}: PoA = {} (bound {})",
                        r.network_enabled,
                        num(r.report.poa),
                        num(r.report.bound)
                    )
                })
                .collect();
            format!("{}; wrote {out}", parts.join(", "))
        }
        Command::Sweep => {
            let cells = cmd_sweep(&scenario, &flags)?;
            let failed = cells.iter().filter(|c| c.error.is_some() || !c.converged).count();
            format!("{} cells, {failed} flagged; wrote {out}", cells.len())
        }
        Command::Security => {
            let c = cmd_security(&scenario, &flags)?;
            format!(
                "constrained: worst voltage {} / line {}; unconstrained: worst voltage {} / line {}; wrote {out}",
                num(c.constrained.worst_voltage_violation),
                num(c.constrained.worst_line_violation),
                num(c.unconstrained.worst_voltage_violation),
                num(c.unconstrained.worst_line_violation)
            )
        }
        Command::Validate => serde_json::to_string_pretty(&cmd_validate(&scenario)?)?,
    })
}
