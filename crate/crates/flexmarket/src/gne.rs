//! Distributed equilibrium seeking among consumers, the BRP and the DSO.
//!
//! Every round has four phases:
//!
//! 1. each consumer moves its intercept against its local gradient and sends
//!    the tentative bid to the DSO;
//! 2. the DSO projects the bid vector onto the network-feasible set and returns
//!    the corrected bids;
//! 3. the BRP clears the market and broadcasts the price;
//! 4. each consumer updates the multiplier of its cap `x_n <= x_hat_n` and
//!    reports it to the BRP, which broadcasts the sum.
//!
//! Agents only hold their own data and talk through [`Message`]s; every message
//! is checked against the information partition as it is delivered.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{self, ConsumerProfile, GameConstants, PoaReport, StepSizes};
use crate::grid::FeasibleSet;
use crate::market;
use crate::qpsolve::{self, PsiProjector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Active consumer, by position in the bid vector.
    Consumer(usize),
    Brp,
    Dso,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// Tentative bid of one consumer.
    Bid { consumer: usize, beta: f64 },
    /// Corrected bid returned to its owner.
    CorrectedBid { consumer: usize, beta: f64 },
    /// Full corrected bid vector, for the BRP.
    CorrectedBids(Vec<f64>),
    Price(f64),
    Dual { consumer: usize, gamma: f64 },
    DualSum(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Message {
    pub from: Role,
    pub to: Role,
    pub payload: Payload,
}

impl Message {
    /// Whether delivering this message respects the information partition.
    pub fn permitted(&self) -> bool {
        use Payload::*;
        match (self.from, self.to, &self.payload) {
            (Role::Consumer(a), Role::Dso, Bid { consumer, .. }) => a == *consumer,
            (Role::Dso, Role::Consumer(a), CorrectedBid { consumer, .. }) => a == *consumer,
            (Role::Dso, Role::Brp, CorrectedBids(_)) => true,
            (Role::Brp, Role::Consumer(_), Price(_)) => true,
            (Role::Consumer(a), Role::Brp, Dual { consumer, .. }) => a == *consumer,
            (Role::Brp, Role::Consumer(_), DualSum(_)) => true,
            _ => false,
        }
    }
}

/// Audit trail of the exchanged messages.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MessageLog {
    pub delivered: u64,
    pub violations: Vec<Message>,
    /// Most recent messages, up to `capacity`.
    #[serde(skip)]
    pub recent: std::collections::VecDeque<Message>,
    #[serde(skip)]
    pub capacity: usize,
}

impl MessageLog {
    fn deliver(&mut self, msg: Message) -> Message {
        self.delivered += 1;
        if !msg.permitted() {
            self.violations.push(msg.clone());
        }
        if self.capacity > 0 {
            if self.recent.len() == self.capacity {
                self.recent.pop_front();
            }
            self.recent.push_back(msg.clone());
        }
        msg
    }
}

/// Tentative bid of one consumer.
///
/// `h = C'(alpha lambda + beta) (N-1)/N + (alpha lambda (2-N) + beta)/(alpha N)
///      - dual_sum / N + gamma`, and the result is `beta - rho h`.
pub fn consumer_step(
    profile: &ConsumerProfile,
    beta: f64,
    lambda: f64,
    gamma: f64,
    dual_sum: f64,
    constants: &GameConstants,
    rho: f64,
) -> f64 {
    beta - rho * local_gradient(profile, beta, lambda, gamma, dual_sum, constants)
}

/// The direction `h` used by [`consumer_step`].
pub fn local_gradient(
    profile: &ConsumerProfile,
    beta: f64,
    lambda: f64,
    gamma: f64,
    dual_sum: f64,
    constants: &GameConstants,
) -> f64 {
    let nf = constants.n as f64;
    let alpha = constants.alpha;
    let x = alpha * lambda + beta;
    profile.marginal_cost_extended(x) * (nf - 1.0) / nf + (alpha * lambda * (2.0 - nf) + beta) / (alpha * nf)
        - dual_sum / nf
        + gamma
}

/// Projected multiplier update `max(0, gamma + nu (2 x_curr - x_prev - x_hat))`.
pub fn dual_step(gamma: f64, x_curr: f64, x_prev: f64, x_hat: f64, nu: f64) -> f64 {
    (gamma + nu * (2.0 * x_curr - x_prev - x_hat)).max(0.0)
}

/// A consumer: its own cost data and the public market parameters.
#[derive(Debug, Clone)]
pub struct ConsumerAgent {
    index: usize,
    profile: ConsumerProfile,
    constants: GameConstants,
    steps: StepSizes,
    beta: f64,
    gamma: f64,
    x_prev: f64,
    lambda: f64,
    dual_sum: f64,
}

impl ConsumerAgent {
    fn propose(&self) -> Message {
        let beta = consumer_step(
            &self.profile,
            self.beta,
            self.lambda,
            self.gamma,
            self.dual_sum,
            &self.constants,
            self.steps.rho,
        );
        Message {
            from: Role::Consumer(self.index),
            to: Role::Dso,
            payload: Payload::Bid {
                consumer: self.index,
                beta,
            },
        }
    }

    fn update_dual(&mut self) -> Message {
        let x = self.constants.alpha * self.lambda + self.beta;
        self.gamma = dual_step(self.gamma, x, self.x_prev, self.profile.x_hat, self.steps.nu);
        self.x_prev = x;
        Message {
            from: Role::Consumer(self.index),
            to: Role::Brp,
            payload: Payload::Dual {
                consumer: self.index,
                gamma: self.gamma,
            },
        }
    }

    fn receive(&mut self, msg: &Message) {
        match msg.payload {
            Payload::CorrectedBid { beta, .. } => self.beta = beta,
            Payload::Price(l) => self.lambda = l,
            Payload::DualSum(s) => self.dual_sum = s,
            _ => {}
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn allocation(&self) -> f64 {
        self.constants.alpha * self.lambda + self.beta
    }
}

/// The balance responsible party: knows `x_tot` and the common slope.
#[derive(Debug, Clone)]
pub struct BrpAgent {
    x_tot: f64,
    alpha: f64,
    beta: Vec<f64>,
    gammas: Vec<f64>,
    lambda: f64,
}

impl BrpAgent {
    fn clear(&mut self) -> Result<f64> {
        self.lambda = market::clearing_price(&self.beta, self.alpha, self.x_tot)?;
        Ok(self.lambda)
    }

    fn receive(&mut self, msg: &Message) {
        match &msg.payload {
            Payload::CorrectedBids(b) => self.beta.clone_from(b),
            Payload::Dual { consumer, gamma } => self.gammas[*consumer] = *gamma,
            _ => {}
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `sum_n (alpha lambda + beta_n) - x_tot` for the current bids.
    pub fn balance_error(&self) -> f64 {
        self.beta.iter().map(|b| self.alpha * self.lambda + b).sum::<f64>() - self.x_tot
    }
}

/// The distribution system operator: holds the network and the projector.
#[derive(Debug, Clone)]
pub struct DsoAgent {
    projector: PsiProjector,
    tentative: Vec<f64>,
}

impl DsoAgent {
    fn receive(&mut self, msg: &Message) {
        if let Payload::Bid { consumer, beta } = msg.payload {
            self.tentative[consumer] = beta;
        }
    }

    fn correct(&mut self) -> Result<Vec<f64>> {
        self.projector.project(&self.tentative)
    }

    pub fn projector(&self) -> &PsiProjector {
        &self.projector
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    ProjectionFailure,
}

/// Iteration controls.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub stop_tol: f64,
    pub max_iter: usize,
    /// Explicit step sizes; the largest admissible equal steps otherwise.
    pub steps: Option<StepSizes>,
    pub kappa: Option<f64>,
    pub initial_beta: Option<Vec<f64>>,
    pub initial_gamma: Option<Vec<f64>>,
    /// Number of recent messages kept for inspection.
    pub message_history: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stop_tol: 1e-5,
            max_iter: 100_000,
            steps: None,
            kappa: None,
            initial_beta: None,
            initial_gamma: None,
            message_history: 0,
        }
    }
}

/// One line of the optional iteration trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    pub d_beta2: f64,
    pub d_gamma2: f64,
    pub lambda: f64,
}

/// Outcome of one round.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RoundOutcome {
    pub d_beta2: f64,
    pub d_gamma2: f64,
    pub lambda: f64,
}

impl RoundOutcome {
    pub fn residual(&self) -> f64 {
        self.d_beta2 + self.d_gamma2
    }
}

/// State of a running market.
pub struct MarketSession {
    consumers: Vec<ConsumerAgent>,
    brp: BrpAgent,
    dso: DsoAgent,
    log: MessageLog,
    constants: GameConstants,
    steps: StepSizes,
    k: usize,
    max_balance_error: f64,
}

impl MarketSession {
    /// Sets up the agents for the active consumers `profiles`, listed in the
    /// order of the allocation block of `set`.
    pub fn new(set: &FeasibleSet, profiles: &[ConsumerProfile], alpha: f64, options: &RunOptions) -> Result<Self> {
        let n = profiles.len();
        if n != set.active_count() {
            return Err(Error::dim("active consumers", set.active_count(), n));
        }
        for p in profiles {
            p.validate()?;
        }
        let constants = GameConstants::new(profiles, alpha, options.kappa)?;
        let steps = match options.steps {
            Some(s) => {
                game::check_step_sizes(&constants, &s)?;
                s
            }
            None => game::max_step_sizes(&constants)?,
        };
        let beta0 = options.initial_beta.clone().unwrap_or_else(|| vec![0.0; n]);
        let gamma0 = options.initial_gamma.clone().unwrap_or_else(|| vec![0.0; n]);
        if beta0.len() != n {
            return Err(Error::dim("initial bids", n, beta0.len()));
        }
        if gamma0.len() != n {
            return Err(Error::dim("initial multipliers", n, gamma0.len()));
        }
        if gamma0.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Domain("initial multipliers must be nonnegative".into()));
        }

        let mut brp = BrpAgent {
            x_tot: set.x_tot,
            alpha,
            beta: beta0.clone(),
            gammas: gamma0.clone(),
            lambda: 0.0,
        };
        let lambda0 = brp.clear()?;
        let dual_sum0: f64 = gamma0.iter().sum();
        let consumers = profiles
            .iter()
            .enumerate()
            .map(|(i, p)| ConsumerAgent {
                index: i,
                profile: p.clone(),
                constants,
                steps,
                beta: beta0[i],
                gamma: gamma0[i],
                x_prev: alpha * lambda0 + beta0[i],
                lambda: lambda0,
                dual_sum: dual_sum0,
            })
            .collect();
        let dso = DsoAgent {
            projector: PsiProjector::new(set)?,
            tentative: vec![0.0; n],
        };
        Ok(Self {
            consumers,
            brp,
            dso,
            log: MessageLog {
                capacity: options.message_history,
                ..MessageLog::default()
            },
            constants,
            steps,
            k: 0,
            max_balance_error: 0.0,
        })
    }

    pub fn constants(&self) -> &GameConstants {
        &self.constants
    }

    pub fn steps(&self) -> StepSizes {
        self.steps
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn log(&self) -> &MessageLog {
        &self.log
    }

    pub fn dso(&self) -> &DsoAgent {
        &self.dso
    }

    pub fn beta(&self) -> Vec<f64> {
        self.consumers.iter().map(|c| c.beta).collect()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.consumers.iter().map(|c| c.gamma).collect()
    }

    pub fn allocation(&self) -> Vec<f64> {
        self.consumers.iter().map(|c| c.allocation()).collect()
    }

    pub fn lambda(&self) -> f64 {
        self.brp.lambda
    }

    /// Largest `|sum x - x_tot|` seen after any price update.
    pub fn max_balance_error(&self) -> f64 {
        self.max_balance_error
    }

    /// Runs one full round.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let beta_old = self.beta();
        let gamma_old = self.gamma();

        for i in 0..self.consumers.len() {
            let msg = self.log.deliver(self.consumers[i].propose());
            self.dso.receive(&msg);
        }

        let corrected = self.dso.correct()?;
        for (i, &beta) in corrected.iter().enumerate() {
            let msg = self.log.deliver(Message {
                from: Role::Dso,
                to: Role::Consumer(i),
                payload: Payload::CorrectedBid { consumer: i, beta },
            });
            self.consumers[i].receive(&msg);
        }
        let msg = self.log.deliver(Message {
            from: Role::Dso,
            to: Role::Brp,
            payload: Payload::CorrectedBids(corrected),
        });
        self.brp.receive(&msg);

        let lambda = self.brp.clear()?;
        self.max_balance_error = self.max_balance_error.max(self.brp.balance_error().abs());
        for i in 0..self.consumers.len() {
            let msg = self.log.deliver(Message {
                from: Role::Brp,
                to: Role::Consumer(i),
                payload: Payload::Price(lambda),
            });
            self.consumers[i].receive(&msg);
        }

        for i in 0..self.consumers.len() {
            let msg = self.log.deliver(self.consumers[i].update_dual());
            self.brp.receive(&msg);
        }
        let dual_sum: f64 = self.brp.gammas.iter().sum();
        for i in 0..self.consumers.len() {
            let msg = self.log.deliver(Message {
                from: Role::Brp,
                to: Role::Consumer(i),
                payload: Payload::DualSum(dual_sum),
            });
            self.consumers[i].receive(&msg);
        }

        self.k += 1;
        let d_beta2 = self.beta().iter().zip(&beta_old).map(|(a, b)| (a - b) * (a - b)).sum();
        let d_gamma2 = self.gamma().iter().zip(&gamma_old).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(RoundOutcome {
            d_beta2,
            d_gamma2,
            lambda,
        })
    }

    /// Iterates until the squared change of `(beta, gamma)` drops below
    /// `options.stop_tol` or `options.max_iter` rounds have run.
    pub fn run(&mut self, options: &RunOptions, mut trace: Option<&mut dyn Write>) -> Result<SolveReport> {
        let mut history = Vec::new();
        let mut termination = Termination::MaxIter;
        let mut failure = None;
        while self.k < options.max_iter {
            match self.step() {
                Ok(out) => {
                    history.push(out.residual());
                    if let Some(w) = trace.as_deref_mut() {
                        let rec = TraceRecord {
                            k: self.k,
                            d_beta2: out.d_beta2,
                            d_gamma2: out.d_gamma2,
                            lambda: out.lambda,
                        };
                        serde_json::to_writer(&mut *w, &rec)?;
                        w.write_all(b"\n")?;
                    }
                    if out.residual() < options.stop_tol {
                        termination = Termination::Converged;
                        break;
                    }
                }
                Err(e @ (Error::Infeasible { .. } | Error::Solver { .. })) => {
                    termination = Termination::ProjectionFailure;
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.report(termination, history, failure))
    }

    fn report(&self, termination: Termination, residual_history: Vec<f64>, failure: Option<String>) -> SolveReport {
        let x = self.allocation();
        let domain_violation = self
            .consumers
            .iter()
            .zip(&x)
            .map(|(c, &xn)| (-xn).max(xn - c.profile.x_hat).max(0.0))
            .fold(0.0, f64::max);
        let lambda = self.lambda();
        SolveReport {
            consumer_ids: self.consumers.iter().map(|c| c.profile.id).collect(),
            beta: self.beta(),
            gamma: self.gamma(),
            x,
            lambda,
            iterations: self.k,
            termination,
            final_residual: residual_history.last().copied().unwrap_or(f64::NAN),
            residual_history,
            constants: self.constants,
            steps: self.steps,
            max_balance_error: self.max_balance_error,
            negative_price: lambda < 0.0,
            domain_violation,
            messages_delivered: self.log.delivered,
            partition_violations: self.log.violations.len(),
            failure,
            oracle_gap: None,
            shadow_x: None,
            poa: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub consumer_ids: Vec<u32>,
    pub beta: Vec<f64>,
    pub x: Vec<f64>,
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub constants: GameConstants,
    pub steps: StepSizes,
    /// Largest `|sum x - x_tot|` after any price update.
    pub max_balance_error: f64,
    pub negative_price: bool,
    /// Largest distance of an allocation from `[0, x_hat]`.
    pub domain_violation: f64,
    pub messages_delivered: u64,
    pub partition_violations: usize,
    /// Why the projection failed, if it did.
    pub failure: Option<String>,
    /// `|x - x_shadow| / |x_shadow|` against the shadow-problem oracle.
    pub oracle_gap: Option<f64>,
    pub shadow_x: Option<Vec<f64>>,
    pub poa: Option<PoaReport>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

/// Runs the market and, if it converged, compares the allocation with the
/// shadow-problem oracle and computes the price of anarchy.
pub fn run(
    set: &FeasibleSet,
    profiles: &[ConsumerProfile],
    alpha: f64,
    options: &RunOptions,
    trace: Option<&mut dyn Write>,
) -> Result<SolveReport> {
    let mut session = MarketSession::new(set, profiles, alpha, options)?;
    let mut report = session.run(options, trace)?;
    if report.converged() {
        let shadow = qpsolve::solve_shadow(set, profiles, alpha)?;
        let norm = shadow.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = report
            .x
            .iter()
            .zip(&shadow.x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        report.oracle_gap = Some(if norm > 0.0 { diff / norm } else { diff });
        let welfare = qpsolve::solve_welfare(set, profiles)?;
        report.poa = game::price_of_anarchy(profiles, &report.x, &welfare.x, alpha).ok();
        report.shadow_x = Some(shadow.x);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn constants(n: usize, alpha: f64) -> GameConstants {
        GameConstants::from_parts(n, alpha, 0.005).unwrap()
    }

    #[test]
    fn consumer_step_examples() {
        let zero = ConsumerProfile::active(1, 2, 0.0, 0.0, 10.0);
        let c = constants(3, 1.0);
        assert_eq!(consumer_step(&zero, 0.0, 0.0, 0.0, 0.0, &c, 0.1), 0.0);

        let lin = ConsumerProfile::active(1, 2, 0.0, 0.4, 10.0);
        let c2 = GameConstants::from_parts(2, 1.0, 0.0).unwrap();
        // h = b/2 + (1 * 1 * 0 + 0) / 2 = 0.2.
        assert_abs_diff_eq!(local_gradient(&lin, 0.0, 1.0, 0.0, 0.0, &c2), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(consumer_step(&lin, 0.0, 1.0, 0.0, 0.0, &c2, 0.5), -0.1, epsilon = 1e-15);
    }

    #[test]
    fn local_gradient_matches_pseudo_gradient() {
        let ps = vec![
            ConsumerProfile::active(1, 2, 0.004, 0.35, 100.0),
            ConsumerProfile::active(2, 3, 0.005, 0.45, 100.0),
            ConsumerProfile::active(3, 4, 0.003, 0.40, 100.0),
            ConsumerProfile::active(4, 5, 0.0045, 0.38, 100.0),
        ];
        let alpha = 30.0;
        let c = GameConstants::new(&ps, alpha, None).unwrap();
        let beta = [4.0, -7.0, 12.5, 0.3];
        let gamma = [0.0, 0.2, 0.05, 0.0];
        let x_tot = 90.0;
        let lambda = market::clearing_price(&beta, alpha, x_tot).unwrap();
        let f = game::pseudo_gradient(&beta, &ps, alpha, x_tot).unwrap();
        let sum: f64 = gamma.iter().sum();
        for i in 0..4 {
            let h = local_gradient(&ps[i], beta[i], lambda, gamma[i], sum, &c);
            assert_abs_diff_eq!(h, f[i] + gamma[i] - sum / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dual_step_examples() {
        assert_eq!(dual_step(0.3, 5.0, 5.0, 5.0, 0.5), 0.3);
        assert_eq!(dual_step(0.0, 0.0, 0.0, 4.0, 0.5), 0.0);
        assert_abs_diff_eq!(dual_step(0.1, 4.0, 2.0, 5.0, 0.5), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn partition_rules() {
        let ok = Message {
            from: Role::Consumer(2),
            to: Role::Dso,
            payload: Payload::Bid { consumer: 2, beta: 1.0 },
        };
        assert!(ok.permitted());
        let spoof = Message {
            from: Role::Consumer(1),
            to: Role::Dso,
            payload: Payload::Bid { consumer: 2, beta: 1.0 },
        };
        assert!(!spoof.permitted());
        let leak = Message {
            from: Role::Dso,
            to: Role::Consumer(0),
            payload: Payload::CorrectedBids(vec![1.0, 2.0]),
        };
        assert!(!leak.permitted());
        let wrong_owner = Message {
            from: Role::Dso,
            to: Role::Consumer(0),
            payload: Payload::CorrectedBid { consumer: 1, beta: 0.0 },
        };
        assert!(!wrong_owner.permitted());
        let dual_to_dso = Message {
            from: Role::Consumer(0),
            to: Role::Dso,
            payload: Payload::Dual { consumer: 0, gamma: 0.0 },
        };
        assert!(!dual_to_dso.permitted());
    }
}
