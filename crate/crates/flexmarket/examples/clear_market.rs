//! Pay-as-clear market with linear supply-function bids `x = alpha * lambda + beta`.
//!
//!     cargo run --example clear_market

use flexmarket::market::{clear, Bid};

fn main() -> flexmarket::Result<()> {
    let alpha = 20.0;
    let bids: Vec<Bid> = [12.0, -5.0, 30.0, 8.0]
        .iter()
        .enumerate()
        .map(|(i, &beta)| Bid {
            consumer_id: i as u32 + 1,
            beta,
            alpha,
        })
        .collect();
    let x_tot = 100.0;
    let result = clear(&bids, x_tot)?;
    println!("clearing price: {:.6} $/kWh", result.lambda);
    for (bid, x) in bids.iter().zip(&result.x) {
        println!("consumer {}: beta = {:>6.1} -> x = {:.4} kWh", bid.consumer_id, bid.beta, x);
    }
    println!("total: {:.4} kWh (requested {x_tot})", result.x.iter().sum::<f64>());
    Ok(())
}
