//! Iteration counts of the market iteration as the number of consumers grows.
//!
//!     cargo run --release --example convergence_scaling

use flexmarket::cli::{run_sweep, Scenario, SweepSpec};

fn main() -> flexmarket::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/ieee33-analog");
    let scenario = Scenario::load(dir)?;
    let spec = SweepSpec {
        n_values: vec![10, 20, 30, 40],
        delta_values: vec![0.5],
        ..scenario.config.sweep.clone().unwrap_or_default()
    };
    let cells = run_sweep(&scenario, &spec, scenario.config.seed, 100_000, 4)?;
    println!("   N  iterations  final residual");
    for c in &cells {
        println!("{:>4}  {:>10}  {:.3e}", c.n, c.iterations, c.final_residual);
    }
    Ok(())
}
