//! The bidding game among active consumers.
//!
//! Each consumer picks the intercept `beta_n` of its supply function to
//! minimise its cost minus the payment it receives at the clearing price. This
//! module holds the consumer cost model, the pseudo-gradient of the game, the
//! monotonicity and Lipschitz constants of that map, the step-size rule of the
//! equilibrium-seeking iteration and the price-of-anarchy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Private data of one consumer.
///
/// Costs are linear-quadratic, `C(x) = a x^2 / 2 + b_lin x`, with `x` in kWh.
/// Passive consumers only contribute their predicted load `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerProfile {
    pub id: u32,
    pub bus_id: usize,
    /// Quadratic cost coefficient, $/(kWh)^2.
    pub a: f64,
    /// Linear cost coefficient, $/kWh.
    pub b_lin: f64,
    /// Maximum flexibility, kWh.
    pub x_hat: f64,
    /// Predicted net active load, kWh.
    pub d: f64,
    pub active: bool,
}

impl ConsumerProfile {
    pub fn active(id: u32, bus_id: usize, a: f64, b_lin: f64, x_hat: f64) -> Self {
        Self {
            id,
            bus_id,
            a,
            b_lin,
            x_hat,
            d: 0.0,
            active: true,
        }
    }

    pub fn passive(id: u32, bus_id: usize, d: f64) -> Self {
        Self {
            id,
            bus_id,
            a: 0.0,
            b_lin: 0.0,
            x_hat: 0.0,
            d,
            active: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d.is_finite() {
            return Err(Error::Schema(format!("consumer {}: load must be finite", self.id)));
        }
        if !self.active {
            return Ok(());
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::Schema(format!(
                "consumer {}: quadratic cost coefficient must be >= 0, got {}",
                self.id, self.a
            )));
        }
        if !(self.b_lin >= 0.0 && self.b_lin.is_finite()) {
            return Err(Error::Schema(format!(
                "consumer {}: linear cost coefficient must be >= 0, got {}",
                self.id, self.b_lin
            )));
        }
        if !(self.x_hat > 0.0 && self.x_hat.is_finite()) {
            return Err(Error::Schema(format!(
                "consumer {}: maximum flexibility must be positive, got {}",
                self.id, self.x_hat
            )));
        }
        Ok(())
    }

    pub fn cost(&self, x: f64) -> f64 {
        0.5 * self.a * x * x + self.b_lin * x
    }

    /// `C'(x)` on the consumer's feasible range `[0, x_hat]`.
    pub fn marginal_cost(&self, x: f64) -> Result<f64> {
        if !(0.0..=self.x_hat).contains(&x) {
            return Err(Error::Domain(format!(
                "consumer {}: flexibility {x} outside [0, {}]",
                self.id, self.x_hat
            )));
        }
        Ok(self.marginal_cost_extended(x))
    }

    /// `C'(x)` continued affinely beyond `[0, x_hat]`, for intermediate
    /// iterates of the equilibrium search.
    pub fn marginal_cost_extended(&self, x: f64) -> f64 {
        self.a * x + self.b_lin
    }

    /// Cost inflated by strategic bidding: `C(x) + x^2 / (2 alpha (N - 1))`.
    pub fn shadow_cost(&self, x: f64, alpha: f64, n: usize) -> f64 {
        self.cost(x) + shadow_markup(x, alpha, n)
    }
}

/// The markup `x^2 / (2 alpha (N - 1))` separating shadow and true costs.
pub fn shadow_markup(x: f64, alpha: f64, n: usize) -> f64 {
    x * x / (2.0 * alpha * (n as f64 - 1.0))
}

/// Upper bound on the slope for which the game has a unique variational
/// equilibrium: `2 / (kappa (N - 1))`. Infinite when `kappa = 0`.
pub fn alpha_limit(kappa: f64, n: usize) -> f64 {
    if kappa == 0.0 {
        f64::INFINITY
    } else {
        2.0 / (kappa * (n as f64 - 1.0))
    }
}

/// Slope chosen as a fraction `delta` of [`alpha_limit`].
pub fn alpha_from_delta(delta: f64, kappa: f64, n: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::GameCondition(format!("delta must lie in (0, 1), got {delta}")));
    }
    if n < 2 {
        return Err(Error::GameCondition(format!("need at least two active consumers, got {n}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::GameCondition(
            "delta parametrisation needs a positive Lipschitz constant".into(),
        ));
    }
    Ok(delta * alpha_limit(kappa, n))
}

/// Largest curvature among the given (active) consumers.
pub fn curvature_bound(profiles: &[ConsumerProfile]) -> f64 {
    profiles.iter().map(|p| p.a).fold(0.0, f64::max)
}

/// Constants of the pseudo-gradient map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GameConstants {
    pub n: usize,
    pub alpha: f64,
    /// Lipschitz constant of the marginal costs.
    pub kappa: f64,
    /// Strong-monotonicity constant `1/(alpha N) - kappa (N-1) / (2N)`.
    pub eta_f: f64,
    /// Lipschitz constant `((N-1)/N) (kappa + 1/alpha)`.
    pub kappa_f: f64,
}

impl GameConstants {
    /// Computes the constants for the active consumers in `profiles`.
    ///
    /// `kappa_override` replaces the default `max_n a_n`; it may only be larger.
    pub fn new(profiles: &[ConsumerProfile], alpha: f64, kappa_override: Option<f64>) -> Result<Self> {
        let n = profiles.len();
        if n < 2 {
            return Err(Error::GameCondition(format!(
                "need at least two active consumers, got {n}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::GameCondition(format!("alpha must be positive, got {alpha}")));
        }
        let computed = curvature_bound(profiles);
        let kappa = match kappa_override {
            Some(k) if k + 1e-15 < computed => {
                return Err(Error::GameCondition(format!(
                    "kappa override {k} is below the cost curvature {computed}"
                )))
            }
            Some(k) => k,
            None => computed,
        };
        Self::from_parts(n, alpha, kappa)
    }

    /// Constants from `N`, `alpha` and `kappa` directly.
    pub fn from_parts(n: usize, alpha: f64, kappa: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::GameCondition(format!(
                "need at least two active consumers, got {n}"
            )));
        }
        let limit = alpha_limit(kappa, n);
        if alpha >= limit {
            return Err(Error::GameCondition(format!(
                "alpha = {alpha} violates the uniqueness condition alpha < 2/(kappa (N-1)) = {limit}"
            )));
        }
        let nf = n as f64;
        let eta_f = 1.0 / (alpha * nf) - kappa * (nf - 1.0) / (2.0 * nf);
        if !(eta_f > 0.0) {
            return Err(Error::GameCondition(format!(
                "pseudo-gradient is not strongly monotone (eta_F = {eta_f})"
            )));
        }
        let kappa_f = (nf - 1.0) / nf * (kappa + 1.0 / alpha);
        Ok(Self {
            n,
            alpha,
            kappa,
            eta_f,
            kappa_f,
        })
    }

    /// `kappa_F^2 / (2 eta_F)`, the left side of the step-size rule.
    pub fn step_coupling(&self) -> f64 {
        self.kappa_f * self.kappa_f / (2.0 * self.eta_f)
    }
}

/// Bid and dual step sizes of the equilibrium-seeking iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub rho: f64,
    pub nu: f64,
}

/// Safety factor applied to the largest admissible equal step.
pub const STEP_MARGIN: f64 = 0.9;

/// Equal bid and dual steps `c = 0.9 c*`, with `c*` the positive root of
/// `c^2 + K c - 1 = 0` and `K = kappa_F^2 / (2 eta_F)`.
pub fn max_step_sizes(constants: &GameConstants) -> Result<StepSizes> {
    if !(constants.eta_f > 0.0) {
        return Err(Error::GameCondition(format!(
            "step sizes need eta_F > 0, got {}",
            constants.eta_f
        )));
    }
    let k = constants.step_coupling();
    // Positive root written to avoid cancellation for large K.
    let root = 2.0 / (k + (k * k + 4.0).sqrt());
    let c = STEP_MARGIN * root;
    let steps = StepSizes { rho: c, nu: c };
    check_step_sizes(constants, &steps)?;
    Ok(steps)
}

/// Accepts `(rho, nu)` only when `kappa_F^2 / (2 eta_F) < 1/rho - nu`.
pub fn check_step_sizes(constants: &GameConstants, steps: &StepSizes) -> Result<()> {
    if !(steps.rho > 0.0 && steps.nu > 0.0) {
        return Err(Error::GameCondition("step sizes must be positive".into()));
    }
    let lhs = constants.step_coupling();
    let rhs = 1.0 / steps.rho - steps.nu;
    if lhs < rhs {
        Ok(())
    } else {
        Err(Error::GameCondition(format!(
            "step sizes rho = {}, nu = {} violate kappa_F^2/(2 eta_F) = {lhs} < 1/rho - nu = {rhs}",
            steps.rho, steps.nu
        )))
    }
}

fn check_active(profiles: &[ConsumerProfile], beta: &[f64]) -> Result<()> {
    if profiles.len() != beta.len() {
        return Err(Error::dim("bid vector", profiles.len(), beta.len()));
    }
    if profiles.len() < 2 {
        return Err(Error::GameCondition("need at least two active consumers".into()));
    }
    Ok(())
}

/// Pseudo-gradient `F(beta)`: the derivative of each consumer's objective
/// with respect to its own intercept.
pub fn pseudo_gradient(
    beta: &[f64],
    profiles: &[ConsumerProfile],
    alpha: f64,
    x_tot: f64,
) -> Result<Vec<f64>> {
    check_active(profiles, beta)?;
    let nf = beta.len() as f64;
    let sum: f64 = beta.iter().sum();
    let shift = (x_tot - sum) / nf;
    Ok(profiles
        .iter()
        .zip(beta)
        .map(|(p, &b)| {
            let x = shift + b;
            p.marginal_cost_extended(x) * (nf - 1.0) / nf
                + ((sum - x_tot) * (nf - 2.0) + nf * b) / (alpha * nf * nf)
        })
        .collect())
}

/// Objective of consumer `n` once price and allocation are substituted:
/// cost of its allocation minus the payment it receives.
pub fn player_objective(
    n: usize,
    beta: &[f64],
    profiles: &[ConsumerProfile],
    alpha: f64,
    x_tot: f64,
) -> Result<f64> {
    check_active(profiles, beta)?;
    if n >= beta.len() {
        return Err(Error::dim("player index", beta.len(), n));
    }
    let nf = beta.len() as f64;
    let residual = x_tot - beta.iter().sum::<f64>();
    let x = residual / nf + beta[n];
    Ok(profiles[n].cost(x) - (residual + nf * beta[n]) * residual / (alpha * nf * nf))
}

/// Total true cost of an allocation.
pub fn total_cost(profiles: &[ConsumerProfile], x: &[f64]) -> f64 {
    profiles.iter().zip(x).map(|(p, &xn)| p.cost(xn)).sum()
}

/// Efficiency of an equilibrium against the social optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoaReport {
    pub cost_equilibrium: f64,
    pub cost_optimum: f64,
    pub poa: f64,
    /// `1 + (1 / (2 alpha (N-1))) sum(xbar^2) / sum(C(xbar))`.
    pub bound: f64,
    /// `poa < bound`.
    pub within_bound: bool,
}

/// Price of anarchy of the equilibrium allocation `x_eq` relative to the
/// welfare-optimal allocation `x_opt`, together with its a-priori bound.
pub fn price_of_anarchy(
    profiles: &[ConsumerProfile],
    x_eq: &[f64],
    x_opt: &[f64],
    alpha: f64,
) -> Result<PoaReport> {
    let n = profiles.len();
    if x_eq.len() != n {
        return Err(Error::dim("equilibrium allocation", n, x_eq.len()));
    }
    if x_opt.len() != n {
        return Err(Error::dim("optimal allocation", n, x_opt.len()));
    }
    if n < 2 {
        return Err(Error::GameCondition("need at least two active consumers".into()));
    }
    let cost_equilibrium = total_cost(profiles, x_eq);
    let cost_optimum = total_cost(profiles, x_opt);
    if !(cost_optimum > 0.0) {
        return Err(Error::Degenerate(format!(
            "optimal total cost is {cost_optimum}; the price of anarchy is undefined"
        )));
    }
    if !(cost_equilibrium > 0.0) {
        return Err(Error::Degenerate(format!(
            "equilibrium total cost is {cost_equilibrium}"
        )));
    }
    let poa = cost_equilibrium / cost_optimum;
    let squares: f64 = x_opt.iter().map(|x| x * x).sum();
    let bound = 1.0 + squares / (2.0 * alpha * (n as f64 - 1.0)) / cost_optimum;
    Ok(PoaReport {
        cost_equilibrium,
        cost_optimum,
        poa,
        bound,
        within_bound: poa < bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn quad(a: f64, b: f64) -> ConsumerProfile {
        ConsumerProfile::active(1, 2, a, b, 100.0)
    }

    #[test]
    fn marginal_cost_examples() {
        let p = quad(0.004, 0.35);
        assert_eq!(p.marginal_cost(0.0).unwrap(), 0.35);
        assert_abs_diff_eq!(p.marginal_cost(50.0).unwrap(), 0.55, epsilon = 1e-15);
        let lin = quad(0.0, 0.4);
        for x in [0.0, 10.0, 99.0] {
            assert_eq!(lin.marginal_cost(x).unwrap(), 0.4);
        }
        assert!(matches!(p.marginal_cost(-1.0), Err(Error::Domain(_))));
        assert!(matches!(p.marginal_cost(100.5), Err(Error::Domain(_))));
        assert_abs_diff_eq!(p.marginal_cost_extended(-10.0), 0.31, epsilon = 1e-15);
    }

    #[test]
    fn constants_examples() {
        let c = GameConstants::from_parts(11, 1.0, 0.005).unwrap();
        assert_relative_eq!(c.eta_f, 0.088_636_363_636_363_6, max_relative = 1e-12);
        assert_relative_eq!(c.kappa_f, 0.913_636_363_636_363_6, max_relative = 1e-12);

        let c = GameConstants::from_parts(4, 2.0, 0.0).unwrap();
        assert_relative_eq!(c.eta_f, 1.0 / 8.0);
        assert_relative_eq!(c.kappa_f, 3.0 / 8.0);

        let boundary = 2.0 / (0.005 * 10.0);
        assert!(matches!(
            GameConstants::from_parts(11, boundary, 0.005),
            Err(Error::GameCondition(_))
        ));
    }

    #[test]
    fn kappa_override_must_dominate() {
        let ps = vec![quad(0.004, 0.4), quad(0.003, 0.4)];
        let c = GameConstants::new(&ps, 1.0, None).unwrap();
        assert_eq!(c.kappa, 0.004);
        assert_eq!(GameConstants::new(&ps, 1.0, Some(0.005)).unwrap().kappa, 0.005);
        assert!(GameConstants::new(&ps, 1.0, Some(0.001)).is_err());
    }

    #[test]
    fn step_sizes_example() {
        // K = 4.708741..., c* = 0.203570..., c = 0.9 c*.
        let c = GameConstants::from_parts(11, 1.0, 0.005).unwrap();
        assert_relative_eq!(c.step_coupling(), 4.708_741_258_741_257, max_relative = 1e-12);
        let s = max_step_sizes(&c).unwrap();
        assert_relative_eq!(s.rho / STEP_MARGIN, 0.203_570_155_800_726_57, max_relative = 1e-10);
        assert_eq!(s.rho, s.nu);
        assert!(c.step_coupling() < 1.0 / s.rho - s.nu);
    }

    #[test]
    fn step_sizes_vanishing_coupling() {
        // Very weak coupling: kappa = 0 and huge N * alpha.
        let c = GameConstants::from_parts(2, 1e9, 0.0).unwrap();
        let s = max_step_sizes(&c).unwrap();
        assert_relative_eq!(s.rho, 0.9, max_relative = 1e-6);
    }

    #[test]
    fn step_rule_rejects_large_steps() {
        let c = GameConstants::from_parts(11, 1.0, 0.005).unwrap();
        assert!(check_step_sizes(&c, &StepSizes { rho: 0.2036, nu: 0.2036 }).is_err());
        assert!(check_step_sizes(&c, &StepSizes { rho: 0.18, nu: 0.18 }).is_ok());
        assert!(check_step_sizes(&c, &StepSizes { rho: 0.0, nu: 0.1 }).is_err());
    }

    #[test]
    fn pseudo_gradient_examples() {
        let ps = vec![quad(0.004, 0.35), quad(0.005, 0.45), quad(0.003, 0.40)];
        let f = pseudo_gradient(&[0.0; 3], &ps, 2.0, 0.0).unwrap();
        for (fn_, p) in f.iter().zip(&ps) {
            assert_abs_diff_eq!(*fn_, p.b_lin * 2.0 / 3.0, epsilon = 1e-15);
        }
        let zero = vec![quad(0.0, 0.0), quad(0.0, 0.0)];
        let f = pseudo_gradient(&[3.0, -1.0], &zero, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(f[0], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn shadow_markup_identity() {
        let p = quad(0.004, 0.35);
        for x in [0.0, 1.0, 17.5, 80.0] {
            assert_abs_diff_eq!(
                p.shadow_cost(x, 3.0, 5) - p.cost(x),
                x * x / (2.0 * 3.0 * 4.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn poa_symmetric_is_one() {
        let ps = vec![quad(0.004, 0.4), quad(0.004, 0.4)];
        let r = price_of_anarchy(&ps, &[50.0, 50.0], &[50.0, 50.0], 10.0).unwrap();
        assert_eq!(r.poa, 1.0);
        assert!(r.within_bound);
        assert!(matches!(
            price_of_anarchy(&ps, &[50.0, 50.0], &[0.0, 0.0], 10.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn alpha_from_delta_bounds() {
        assert_relative_eq!(alpha_from_delta(0.5, 0.005, 11).unwrap(), 20.0, max_relative = 1e-12);
        assert!(alpha_from_delta(1.0, 0.005, 11).is_err());
        assert!(alpha_from_delta(0.0, 0.005, 11).is_err());
    }

    fn sample_profiles(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<ConsumerProfile> {
        use rand::Rng;
        (0..n)
            .map(|i| {
                ConsumerProfile::active(
                    i as u32 + 1,
                    i + 2,
                    rng.gen_range(0.003..0.005),
                    rng.gen_range(0.35..0.45),
                    100.0,
                )
            })
            .collect()
    }

    #[test]
    fn pseudo_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 3, 7, 12] {
            let ps = sample_profiles(n, &mut rng);
            let alpha = 0.6 * alpha_limit(curvature_bound(&ps), n);
            let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let f = pseudo_gradient(&beta, &ps, alpha, 150.0).unwrap();
            for i in 0..n {
                let h = 1e-4;
                let mut up = beta.clone();
                up[i] += h;
                let mut dn = beta.clone();
                dn[i] -= h;
                let fd = (player_objective(i, &up, &ps, alpha, 150.0).unwrap()
                    - player_objective(i, &dn, &ps, alpha, 150.0).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(f[i], fd, epsilon = 1e-7 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn monotone_and_lipschitz_on_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 5, 11, 30] {
            let ps = sample_profiles(n, &mut rng);
            let c = GameConstants::new(&ps, 0.7 * alpha_limit(curvature_bound(&ps), n), None).unwrap();
            for _ in 0..250 {
                let b1: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
                let b2: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
                let f1 = pseudo_gradient(&b1, &ps, c.alpha, 200.0).unwrap();
                let f2 = pseudo_gradient(&b2, &ps, c.alpha, 200.0).unwrap();
                let (mut inner, mut db2, mut df2) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let db = b1[i] - b2[i];
                    let df = f1[i] - f2[i];
                    inner += db * df;
                    db2 += db * db;
                    df2 += df * df;
                }
                assert!(inner >= c.eta_f * db2 * (1.0 - 1e-9));
                assert!(df2.sqrt() <= c.kappa_f * db2.sqrt() * (1.0 + 1e-9));
            }
        }
    }
}
