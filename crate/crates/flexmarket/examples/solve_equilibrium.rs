//! Runs the semi-decentralized market iteration on the shipped 33-bus
//! scenario and compares it with the centralized shadow problem.
//!
//!     cargo run --release --example solve_equilibrium

use flexmarket::cli::Scenario;
use flexmarket::gne;

fn main() -> flexmarket::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/ieee33-analog");
    let scenario = Scenario::load(dir)?;
    let set = scenario.feasible_set(true)?;
    let profiles = scenario.active_profiles();
    let options = scenario.run_options(None, None);
    let report = gne::run(&set, &profiles, scenario.alpha()?, &options, None)?;
    println!(
        "{:?} after {} iterations; lambda = {:.6} $/kWh",
        report.termination, report.iterations, report.lambda
    );
    for (id, (x, g)) in report.consumer_ids.iter().zip(report.x.iter().zip(&report.gamma)) {
        println!("consumer {id:>3}: x = {x:9.4} kWh, gamma = {g:.3e}");
    }
    if let Some(gap) = report.oracle_gap {
        println!("relative gap to shadow-problem optimum: {gap:.3e}");
    }
    println!(
        "messages delivered: {}, partition violations: {}",
        report.messages_delivered, report.partition_violations
    );
    Ok(())
}
