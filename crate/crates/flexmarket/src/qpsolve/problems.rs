use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::admm::Workspace;
use super::program::{ConvexProgram, Disk, Settings, Solution, Status};
use crate::error::{Error, Result};
use crate::game::{self, ConsumerProfile};
use crate::grid::FeasibleSet;

/// Program over the stacked variables of `set` whose objective only touches
/// the allocations: `sum_n quad_n x_n^2 / 2 + linear_n x_n`.
pub fn allocation_program(set: &FeasibleSet, quad: &[f64], linear: &[f64]) -> Result<ConvexProgram> {
    let n = set.active_count();
    if quad.len() != n {
        return Err(Error::dim("quadratic coefficients", n, quad.len()));
    }
    if linear.len() != n {
        return Err(Error::dim("linear coefficients", n, linear.len()));
    }
    let len = set.layout.len;
    let (eq_matrix, eq_rhs) = set.equality_block();
    let mut p = DMatrix::zeros(len, len);
    let mut q = DVector::zeros(len);
    for (k, i) in set.layout.alloc.clone().enumerate() {
        p[(i, i)] = quad[k];
        q[i] = linear[k];
    }
    Ok(ConvexProgram {
        quad: p,
        linear: q,
        constant: 0.0,
        eq_matrix,
        eq_rhs,
        lower: set.lower.clone(),
        upper: set.upper.clone(),
        disks: set
            .disks
            .iter()
            .map(|d| Disk {
                i: d.i,
                j: d.j,
                radius: d.radius,
            })
            .collect(),
    })
}

fn status_error(sol: &Solution, block: &str) -> Error {
    match sol.status {
        Status::Infeasible => Error::Infeasible { block: block.into() },
        _ => Error::Solver {
            block: block.into(),
            detail: format!(
                "stopped after {} iterations with primal residual {:.3e} and dual residual {:.3e}",
                sol.iterations, sol.primal_residual, sol.dual_residual
            ),
        },
    }
}

/// Euclidean projection onto the set of bids whose clearing allocation is
/// network-feasible.
///
/// That set is invariant under shifting every bid by the same amount, so the
/// projection splits into the projection of the implied allocation
/// `A beta + b` onto the feasible allocations plus the unchanged mean bid.
/// The workspace is kept between calls and warm-starts the next projection.
#[derive(Debug, Clone)]
pub struct PsiProjector {
    ws: Workspace,
    n: usize,
    x_tot: f64,
    last: Option<Solution>,
}

impl PsiProjector {
    pub fn new(set: &FeasibleSet) -> Result<Self> {
        Self::with_settings(set, Settings::default())
    }

    pub fn with_settings(set: &FeasibleSet, settings: Settings) -> Result<Self> {
        let n = set.active_count();
        if n < 2 {
            return Err(Error::GameCondition("need at least two active consumers".into()));
        }
        let prog = allocation_program(set, &vec![1.0; n], &vec![0.0; n])?;
        Ok(Self {
            ws: Workspace::new(prog, settings)?,
            n,
            x_tot: set.x_tot,
            last: None,
        })
    }

    pub fn consumer_count(&self) -> usize {
        self.n
    }

    /// Solver output of the most recent projection.
    pub fn last_solution(&self) -> Option<&Solution> {
        self.last.as_ref()
    }

    /// Nearest feasible allocation to `x_tilde`.
    pub fn project_allocation(&mut self, x_tilde: &[f64]) -> Result<Vec<f64>> {
        if x_tilde.len() != self.n {
            return Err(Error::dim("allocation", self.n, x_tilde.len()));
        }
        let mut q = DVector::zeros(self.ws.program().len());
        for (k, v) in x_tilde.iter().enumerate() {
            q[k] = -v;
        }
        self.ws.set_linear(&q);
        let sol = self.ws.solve();
        let ok = sol.is_optimal();
        let x = sol.primal.rows(0, self.n).iter().copied().collect();
        let err = (!ok).then(|| status_error(&sol, "projection onto the network-feasible set"));
        self.last = Some(sol);
        match err {
            Some(e) => Err(e),
            None => Ok(x),
        }
    }

    pub fn project(&mut self, beta_tilde: &[f64]) -> Result<Vec<f64>> {
        if beta_tilde.len() != self.n {
            return Err(Error::dim("bid vector", self.n, beta_tilde.len()));
        }
        let nf = self.n as f64;
        let mean = beta_tilde.iter().sum::<f64>() / nf;
        let x_tilde: Vec<f64> = beta_tilde.iter().map(|b| b - mean + self.x_tot / nf).collect();
        let x = self.project_allocation(&x_tilde)?;
        Ok(x.iter().map(|xn| xn - self.x_tot / nf + mean).collect())
    }
}

/// One-shot projection of `beta_tilde` onto the feasible bids of `set`.
pub fn project_onto_psi(beta_tilde: &[f64], set: &FeasibleSet) -> Result<Vec<f64>> {
    PsiProjector::new(set)?.project(beta_tilde)
}

/// Optimal allocation of a benchmark problem.
#[derive(Debug, Clone, Serialize)]
pub struct Optimum {
    pub x: Vec<f64>,
    /// Value of the minimised objective.
    pub objective: f64,
    /// Total true cost `sum C_n(x_n)` of the allocation.
    pub total_cost: f64,
    pub solution: Solution,
}

fn check_profiles(set: &FeasibleSet, profiles: &[ConsumerProfile]) -> Result<()> {
    if profiles.len() != set.active_count() {
        return Err(Error::dim("active consumers", set.active_count(), profiles.len()));
    }
    for p in profiles {
        p.validate()?;
        if !p.active {
            return Err(Error::Schema(format!("consumer {} is not active", p.id)));
        }
    }
    Ok(())
}

fn solve_capped(set: &FeasibleSet, profiles: &[ConsumerProfile], quad: &[f64], what: &str) -> Result<Optimum> {
    let caps: Vec<f64> = profiles.iter().map(|p| p.x_hat).collect();
    if caps.iter().sum::<f64>() < set.x_tot {
        return Err(Error::Infeasible {
            block: format!("flexibility caps: sum of x_hat is below x_tot = {}", set.x_tot),
        });
    }
    let capped = set.with_caps(&caps)?;
    let linear: Vec<f64> = profiles.iter().map(|p| p.b_lin).collect();
    let prog = allocation_program(&capped, quad, &linear)?;
    let sol = Workspace::new(prog, Settings::default())?.solve();
    match sol.status {
        Status::Optimal => {
            let x: Vec<f64> = sol.primal.rows(0, profiles.len()).iter().copied().collect();
            Ok(Optimum {
                total_cost: game::total_cost(profiles, &x),
                objective: sol.objective,
                x,
                solution: sol,
            })
        }
        Status::Infeasible => {
            let block = if capped.has_network() {
                let mut relaxed = capped.clone();
                relaxed.disks.clear();
                let prog = allocation_program(&relaxed, quad, &linear)?;
                if Workspace::new(prog, Settings::default())?.solve().is_optimal() {
                    "line capacity limits"
                } else {
                    "voltage and angle limits"
                }
            } else {
                "flexibility caps"
            };
            Err(Error::Infeasible {
                block: format!("{what}: {block}"),
            })
        }
        Status::MaxIter => Err(status_error(&sol, what)),
    }
}

/// Allocation minimising the total cost `sum C_n(x_n)` over the feasible set
/// with the caps `x <= x_hat`.
pub fn solve_welfare(set: &FeasibleSet, profiles: &[ConsumerProfile]) -> Result<Optimum> {
    check_profiles(set, profiles)?;
    let quad: Vec<f64> = profiles.iter().map(|p| p.a).collect();
    solve_capped(set, profiles, &quad, "welfare problem")
}

/// Allocation minimising the shadow costs
/// `sum C_n(x_n) + x_n^2 / (2 alpha (N-1))`; it equals the equilibrium
/// allocation of the bidding game.
pub fn solve_shadow(set: &FeasibleSet, profiles: &[ConsumerProfile], alpha: f64) -> Result<Optimum> {
    check_profiles(set, profiles)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::GameCondition(format!("alpha must be positive, got {alpha}")));
    }
    let n = profiles.len();
    if n < 2 {
        return Err(Error::GameCondition("need at least two active consumers".into()));
    }
    let markup = 1.0 / (alpha * (n as f64 - 1.0));
    let quad: Vec<f64> = profiles.iter().map(|p| p.a + markup).collect();
    solve_capped(set, profiles, &quad, "shadow problem")
}
