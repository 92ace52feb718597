//! Euclidean projection of a bid vector onto the network-feasible set,
//! computed by the built-in conic solver.
//!
//!     cargo run --example project_psi

use flexmarket::game::ConsumerProfile;
use flexmarket::grid::{assemble_feasible_set, Bus, Direction, DistributionNetwork, Line, MarketSetup, PowerBase};
use flexmarket::market;
use flexmarket::qpsolve::PsiProjector;

fn line(from: usize, to: usize, r: f64, x: f64, cap: f64) -> Line {
    let d = r * r + x * x;
    Line {
        from,
        to,
        conductance: r / d,
        susceptance: -x / d,
        capacity: cap,
    }
}

fn main() -> flexmarket::Result<()> {
    let buses = (1..=4)
        .map(|id| Bus {
            id,
            vmin: 0.95,
            vmax: 1.05,
            theta_min: -0.5,
            theta_max: 0.5,
            reactive_injection: 0.0,
        })
        .collect();
    let lines = vec![
        line(1, 2, 0.02, 0.03, 1.0),
        line(2, 3, 0.03, 0.04, 1.0),
        line(3, 4, 0.04, 0.05, 0.005),
    ];
    let network = DistributionNetwork::new(buses, lines)?;
    let consumers = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 200.0),
        ConsumerProfile::active(2, 3, 0.003, 0.38, 200.0),
        ConsumerProfile::active(3, 4, 0.005, 0.40, 200.0),
    ];
    let x_tot = 30.0;
    let set = assemble_feasible_set(
        &network,
        &consumers,
        &MarketSetup {
            x_tot,
            direction: Direction::Deficit,
            base: PowerBase {
                base_mva: 1.0,
                interval_hours: 1.0,
            },
            network_enabled: true,
        },
    )?;
    let mut projector = PsiProjector::new(&set)?;
    // Bids that would push everything to the end of the feeder.
    let beta_tilde = [-10.0, -10.0, 20.0];
    let beta = projector.project(&beta_tilde)?;
    let x = market::allocate(&beta, x_tot)?;
    println!("requested allocation: {:?}", market::allocate(&beta_tilde, x_tot)?);
    println!("projected bids:       {beta:.4?}");
    println!("feasible allocation:  {x:.4?}");
    if let Some(sol) = projector.last_solution() {
        println!(
            "solver: {:?} after {} iterations, KKT = {:.2e}/{:.2e}/{:.2e}",
            sol.status, sol.iterations, sol.kkt.primal, sol.kkt.stationarity, sol.kkt.complementarity
        );
    }
    Ok(())
}
