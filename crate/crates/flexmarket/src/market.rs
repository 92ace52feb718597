//! Supply-function bids and pay-as-clear settlement.
//!
//! Every active consumer offers `x_n = alpha * lambda + beta_n` with a common
//! slope `alpha`. The BRP picks the single price at which the offers add up to
//! the required flexibility `x_tot`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// A linear supply-function bid `x = alpha * lambda + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bid {
    pub consumer_id: u32,
    /// Intercept in kWh.
    pub beta: f64,
    /// Slope in kWh per ($/kWh); identical across all bids of a clearing.
    pub alpha: f64,
}

impl Bid {
    pub fn quantity_at(&self, price: f64) -> f64 {
        self.alpha * price + self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearingResult {
    /// Clearing price in $/kWh. May be negative.
    pub lambda: f64,
    /// Allocated flexibility per bid, kWh.
    pub x: Vec<f64>,
}

impl ClearingResult {
    pub fn negative_price(&self) -> bool {
        self.lambda < 0.0
    }
}

fn check_players(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::GameCondition(format!(
            "the market needs at least two active consumers, got {n}"
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::GameCondition(format!(
            "supply-function slope must be positive, got {alpha}"
        )));
    }
    Ok(())
}

/// Pay-as-clear price `(x_tot - sum(beta)) / (alpha * N)`.
pub fn clearing_price(beta: &[f64], alpha: f64, x_tot: f64) -> Result<f64> {
    check_players(beta.len())?;
    check_alpha(alpha)?;
    Ok((x_tot - beta.iter().sum::<f64>()) / (alpha * beta.len() as f64))
}

/// Flexibility allocated to each bidder at the clearing price.
///
/// Independent of `alpha`: `x_n = (x_tot - sum(beta)) / N + beta_n`.
pub fn allocate(beta: &[f64], x_tot: f64) -> Result<Vec<f64>> {
    check_players(beta.len())?;
    let shift = (x_tot - beta.iter().sum::<f64>()) / beta.len() as f64;
    Ok(beta.iter().map(|b| shift + b).collect())
}

/// The affine clearing map `x = A beta + b` with `A = I - 11^T / N` and
/// `b = (x_tot / N) 1`.
pub fn allocation_matrix(n: usize, x_tot: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_players(n)?;
    let nf = n as f64;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - 1.0 / nf } else { -1.0 / nf });
    Ok((a, DVector::from_element(n, x_tot / nf)))
}

/// Clears a set of bids sharing one slope.
pub fn clear(bids: &[Bid], x_tot: f64) -> Result<ClearingResult> {
    check_players(bids.len())?;
    let alpha = bids[0].alpha;
    if let Some(b) = bids.iter().find(|b| b.alpha != alpha) {
        return Err(Error::GameCondition(format!(
            "bid of consumer {} has slope {} but the clearing uses {alpha}",
            b.consumer_id, b.alpha
        )));
    }
    let beta: Vec<f64> = bids.iter().map(|b| b.beta).collect();
    let lambda = clearing_price(&beta, alpha, x_tot)?;
    let x = bids.iter().map(|b| b.quantity_at(lambda)).collect();
    Ok(ClearingResult { lambda, x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn price_examples() {
        assert_eq!(clearing_price(&[0.0, 0.0], 1.0, 100.0).unwrap(), 50.0);
        assert_abs_diff_eq!(clearing_price(&[10.0, -10.0], 0.5, 100.0).unwrap(), 100.0);
        assert_eq!(clearing_price(&[60.0, 40.0], 0.7, 100.0).unwrap(), 0.0);
        assert!(matches!(
            clearing_price(&[1.0], 1.0, 1.0),
            Err(Error::GameCondition(_))
        ));
        assert!(clearing_price(&[1.0, 2.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(&[0.0, 0.0], 100.0).unwrap(), vec![50.0, 50.0]);
        assert_eq!(allocate(&[10.0, -10.0], 100.0).unwrap(), vec![60.0, 40.0]);
        assert_eq!(allocate(&[70.0, 30.0], 100.0).unwrap(), vec![70.0, 30.0]);
    }

    #[test]
    fn allocation_matrix_is_a_projector() {
        let (a, b) = allocation_matrix(2, 100.0).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
        assert_eq!(b, DVector::from_element(2, 50.0));

        let (a, _) = allocation_matrix(5, 1.0).unwrap();
        assert!((&a * DVector::from_element(5, 1.0)).norm() < 1e-15);
        // Idempotence against an explicit triple loop.
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a[(i, k)] * a[(k, j)];
                }
                assert_abs_diff_eq!(s, a[(i, j)], epsilon = 1e-15);
            }
        }
        let eig = a.symmetric_eigen().eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-12);
        for e in &ev[1..] {
            assert_abs_diff_eq!(*e, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn clear_rejects_mixed_slopes() {
        let bids = [
            Bid { consumer_id: 1, beta: 0.0, alpha: 1.0 },
            Bid { consumer_id: 2, beta: 0.0, alpha: 2.0 },
        ];
        assert!(clear(&bids, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn clearing_identities(
            beta in prop::collection::vec(-50.0f64..50.0, 2..12),
            alpha in 0.1f64..50.0,
            x_tot in 0.0f64..500.0,
        ) {
            let x = allocate(&beta, x_tot).unwrap();
            let total: f64 = x.iter().sum();
            prop_assert!((total - x_tot).abs() <= 1e-10 * (1.0 + x_tot));
            let lambda = clearing_price(&beta, alpha, x_tot).unwrap();
            for (xn, bn) in x.iter().zip(&beta) {
                prop_assert!((xn - (alpha * lambda + bn)).abs() <= 1e-9 * (1.0 + xn.abs()));
            }
            let (a, b) = allocation_matrix(beta.len(), x_tot).unwrap();
            let via_matrix = &a * DVector::from_column_slice(&beta) + b;
            for (u, v) in via_matrix.iter().zip(&x) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }
    }
}
