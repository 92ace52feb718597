//! Solves the weak-feeder surplus scenario with and without network
//! constraints and reports the lowest voltage of each run.
//!
//!     cargo run --release --example security_compare

use flexmarket::cli::{security_compare, Scenario};

fn main() -> flexmarket::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/ieee33-surplus");
    let scenario = Scenario::load(dir)?;
    let cmp = security_compare(&scenario, &scenario.run_options(None, None))?;
    for run in [&cmp.unconstrained, &cmp.constrained] {
        let (bus, vmin) = run
            .state
            .v
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (scenario.network.buses()[k].id, *v))
            .unwrap();
        println!(
            "network rows {:5}: lowest voltage {vmin:.5} pu at bus {bus}, worst line margin {:+.5} pu, |sum x - x_tot| = {:.1e}",
            run.network_enabled, -run.worst_line_violation, run.balance_error
        );
    }
    Ok(())
}
