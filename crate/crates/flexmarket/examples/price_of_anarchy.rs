//! Efficiency of the equilibrium against the social-welfare optimum.
//!
//!     cargo run --release --example price_of_anarchy

use flexmarket::game::{self, ConsumerProfile};
use flexmarket::grid::FeasibleSet;
use flexmarket::qpsolve;

fn main() -> flexmarket::Result<()> {
    let profiles = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.35, 60.0),
        ConsumerProfile::active(2, 3, 0.003, 0.42, 60.0),
        ConsumerProfile::active(3, 4, 0.005, 0.38, 40.0),
        ConsumerProfile::active(4, 5, 0.0035, 0.44, 60.0),
        ConsumerProfile::active(5, 6, 0.0045, 0.40, 50.0),
    ];
    let x_tot = 100.0;
    let set = FeasibleSet::without_network(profiles.iter().map(|p| p.bus_id).collect(), x_tot);
    let welfare = qpsolve::solve_welfare(&set, &profiles)?;
    println!("delta   alpha     PoA        bound");
    for delta in [0.25, 0.5, 0.75] {
        let alpha = game::alpha_from_delta(delta, 0.005, profiles.len())?;
        let shadow = qpsolve::solve_shadow(&set, &profiles, alpha)?;
        let r = game::price_of_anarchy(&profiles, &shadow.x, &welfare.x, alpha)?;
        println!("{delta:<6}  {alpha:<8.3}  {:.6}  {:.6}", r.poa, r.bound);
    }
    Ok(())
}
