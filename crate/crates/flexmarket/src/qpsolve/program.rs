use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// A disk constraint `y_i^2 + y_j^2 <= radius^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Disk {
    pub i: usize,
    pub j: usize,
    pub radius: f64,
}

/// `min 1/2 y'Py + q'y + c` subject to `Ey = e`, `l <= y <= u` and a set of
/// disjoint disk constraints.
///
/// Coordinates that appear in a disk must have infinite box bounds.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    pub quad: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub disks: Vec<Disk>,
}

impl ConvexProgram {
    /// An unconstrained program in `n` variables with zero objective.
    pub fn new(n: usize) -> Self {
        Self {
            quad: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            constant: 0.0,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            disks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.quad * y)) + self.linear.dot(y) + self.constant
    }

    /// Checks sizes, symmetry and semidefiniteness of the objective, box
    /// ordering and the disk block.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.quad.nrows() != n || self.quad.ncols() != n {
            return Err(Error::dim("objective matrix", n, self.quad.nrows()));
        }
        if self.eq_matrix.ncols() != n {
            return Err(Error::dim("equality matrix columns", n, self.eq_matrix.ncols()));
        }
        if self.eq_rhs.len() != self.eq_matrix.nrows() {
            return Err(Error::dim("equality right-hand side", self.eq_matrix.nrows(), self.eq_rhs.len()));
        }
        if self.lower.len() != n {
            return Err(Error::dim("lower bounds", n, self.lower.len()));
        }
        if self.upper.len() != n {
            return Err(Error::dim("upper bounds", n, self.upper.len()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.quad)
            || !finite(&self.eq_matrix)
            || !self.linear.iter().all(|v| v.is_finite())
            || !self.eq_rhs.iter().all(|v| v.is_finite())
            || !self.constant.is_finite()
        {
            return Err(Error::Domain("program data must be finite".into()));
        }
        let scale = self.quad.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.quad[(i, j)] - self.quad[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Domain("objective matrix is not symmetric".into()));
                }
            }
        }
        if n > 0 && self.quad.amax() > 0.0 {
            let min_eig = self.quad.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < -1e-10 * scale {
                return Err(Error::Domain(format!(
                    "objective matrix is not positive semidefinite (eigenvalue {min_eig})"
                )));
            }
        }
        for i in 0..n {
            if self.lower[i].is_nan() || self.upper[i].is_nan() {
                return Err(Error::Domain("box bounds must not be NaN".into()));
            }
            if self.lower[i] > self.upper[i] {
                return Err(Error::Infeasible {
                    block: format!("box bounds of variable {i}"),
                });
            }
        }
        let mut used = vec![false; n];
        for d in &self.disks {
            if d.i >= n || d.j >= n || d.i == d.j {
                return Err(Error::Domain(format!("disk indices ({}, {}) are invalid", d.i, d.j)));
            }
            if !(d.radius > 0.0 && d.radius.is_finite()) {
                return Err(Error::Domain(format!("disk radius must be positive, got {}", d.radius)));
            }
            for k in [d.i, d.j] {
                if used[k] {
                    return Err(Error::Domain(format!("variable {k} appears in two disks")));
                }
                used[k] = true;
                if self.lower[k].is_finite() || self.upper[k].is_finite() {
                    return Err(Error::Domain(format!(
                        "disk variable {k} must not carry box bounds"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Solver tolerances and limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Settings {
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
    /// Over-relaxation factor of the splitting iteration.
    pub relaxation: f64,
    /// Iterations between residual checks and step-size adaptation.
    pub check_every: usize,
    /// Consecutive iterations with a stable divergence direction before the
    /// program is declared infeasible.
    pub infeasibility_window: usize,
    /// Try to finish with an exact active-set solve.
    pub polish: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            eps_pri: 1e-8,
            eps_dual: 1e-8,
            max_iter: 50_000,
            relaxation: 1.6,
            check_every: 10,
            infeasibility_window: 1000,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Absolute optimality measures of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Kkt {
    /// Largest violation of any equality, box or disk constraint.
    pub primal: f64,
    /// Infinity norm of the Lagrangian gradient.
    pub stationarity: f64,
    /// Largest product of a multiplier and its constraint slack.
    pub complementarity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Solution {
    pub primal: DVector<f64>,
    /// Multipliers of the equality rows.
    pub eq_dual: DVector<f64>,
    /// Multipliers of the box block: negative at a lower bound, positive at an
    /// upper bound.
    pub box_dual: DVector<f64>,
    /// Nonnegative multiplier of each disk, for `(|y_d|^2 - r^2) / 2 <= 0`.
    pub disk_dual: Vec<f64>,
    /// Relative primal residual compared against `eps_pri`.
    pub primal_residual: f64,
    /// Relative dual residual compared against `eps_dual`.
    pub dual_residual: f64,
    pub kkt: Kkt,
    pub iterations: usize,
    pub status: Status,
    pub objective: f64,
    /// Whether the returned point came from the exact active-set step.
    pub polished: bool,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}
