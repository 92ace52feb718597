//! Game constants, step-size rule and the pseudo-gradient of the bidding game.
//!
//!     cargo run --example pseudo_gradient

use flexmarket::game::{self, ConsumerProfile, GameConstants};

fn main() -> flexmarket::Result<()> {
    let profiles = vec![
        ConsumerProfile::active(1, 2, 0.004, 0.36, 60.0),
        ConsumerProfile::active(2, 3, 0.003, 0.42, 60.0),
        ConsumerProfile::active(3, 4, 0.005, 0.40, 60.0),
        ConsumerProfile::active(4, 5, 0.0045, 0.38, 60.0),
    ];
    let kappa = 0.005;
    let n = profiles.len();
    println!("alpha limit 2/(kappa (N-1)) = {:.4}", game::alpha_limit(kappa, n));
    let alpha = game::alpha_from_delta(0.5, kappa, n)?;
    let constants = GameConstants::new(&profiles, alpha, Some(kappa))?;
    println!(
        "alpha = {:.4}, eta_F = {:.6}, kappa_F = {:.6}",
        constants.alpha, constants.eta_f, constants.kappa_f
    );
    let steps = game::max_step_sizes(&constants)?;
    println!("automatic step sizes: rho = nu = {:.6}", steps.rho);

    let beta = [5.0, -2.0, 10.0, 1.0];
    let f = game::pseudo_gradient(&beta, &profiles, alpha, 100.0)?;
    for (p, g) in profiles.iter().zip(&f) {
        println!("consumer {}: dJ/dbeta = {g:+.6}", p.id);
    }
    Ok(())
}
