//! Operator-splitting engine.
//!
//! The equality block is eliminated once: with an orthonormal null-space
//! basis `Z` of the (row-equilibrated) equality matrix and a particular
//! solution `y0`, every `y = y0 + Z t` satisfies `Ey = e` exactly. The
//! iteration then alternates a small linear solve in `t` (cached Cholesky
//! factor) with closed-form projections onto the boxes and disks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::polish;
use super::program::{ConvexProgram, Kkt, Settings, Solution, Status};
use crate::error::Result;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const SCALE_CAP: f64 = 1e12;
const RANK_TOL: f64 = 1e-11;

/// Disk with indices into the reduced (free) variables.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RDisk {
    pub i: usize,
    pub j: usize,
    pub radius: f64,
}

type Iterate = (DVector<f64>, DVector<f64>, DVector<f64>);

/// Reusable solver state for one program; the linear term may be updated
/// between solves, in which case the previous iterate is used as warm start.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub(crate) program: ConvexProgram,
    pub(crate) settings: Settings,

    /// Free variables (full indices) and the value of every fixed one.
    pub(crate) free: Vec<usize>,
    pub(crate) fixed: Vec<(usize, f64)>,

    pub(crate) p: DMatrix<f64>,
    pub(crate) q: DVector<f64>,
    pub(crate) lower: DVector<f64>,
    pub(crate) upper: DVector<f64>,
    pub(crate) boxed: Vec<usize>,
    pub(crate) disks: Vec<RDisk>,

    /// Row scaling of the equality block and its range-space factors, used to
    /// recover equality multipliers.
    row_scale: DVector<f64>,
    range_u: DMatrix<f64>,
    range_s: DVector<f64>,
    range_v: DMatrix<f64>,
    eq_r: DMatrix<f64>,
    eq_rhs_r: DVector<f64>,
    eq_consistent: bool,

    pub(crate) y0: DVector<f64>,
    pub(crate) z: DMatrix<f64>,
    pub(crate) ztpz: DMatrix<f64>,
    ztcz: DMatrix<f64>,
    /// Per-variable penalty scale; the penalty is `rho * scale`.
    scale: DVector<f64>,
    rho: f64,
    chol: Option<Cholesky<f64, Dyn>>,

    y: DVector<f64>,
    w: DVector<f64>,
    u: DVector<f64>,
    warm: bool,
}

struct Residuals {
    prim: f64,
    prim_scale: f64,
    dual: f64,
    dual_scale: f64,
}

impl Residuals {
    fn prim_rel(&self) -> f64 {
        self.prim / (1.0 + self.prim_scale)
    }
    fn dual_rel(&self) -> f64 {
        self.dual / (1.0 + self.dual_scale)
    }
}

/// A primal point in reduced coordinates with multipliers for the box block
/// (reduced, zero on unbounded and disk coordinates) and the disks.
#[derive(Debug, Clone)]
pub(crate) struct Candidate {
    pub y: DVector<f64>,
    pub box_dual: DVector<f64>,
    pub disk_dual: Vec<f64>,
}

impl Workspace {
    pub fn new(program: ConvexProgram, settings: Settings) -> Result<Self> {
        program.validate()?;
        let n = program.len();

        let mut free = Vec::new();
        let mut fixed = Vec::new();
        for i in 0..n {
            if program.lower[i] == program.upper[i] {
                fixed.push((i, program.lower[i]));
            } else {
                free.push(i);
            }
        }
        let nr = free.len();
        let mut full_to_free = vec![usize::MAX; n];
        for (r, &i) in free.iter().enumerate() {
            full_to_free[i] = r;
        }

        let p = DMatrix::from_fn(nr, nr, |a, b| program.quad[(free[a], free[b])]);
        let lower = DVector::from_fn(nr, |a, _| program.lower[free[a]]);
        let upper = DVector::from_fn(nr, |a, _| program.upper[free[a]]);
        let disks: Vec<RDisk> = program
            .disks
            .iter()
            .map(|d| RDisk {
                i: full_to_free[d.i],
                j: full_to_free[d.j],
                radius: d.radius,
            })
            .collect();
        let boxed = (0..nr)
            .filter(|&a| lower[a].is_finite() || upper[a].is_finite())
            .collect();

        // Move fixed variables to the right-hand side.
        let m = program.eq_matrix.nrows();
        let mut rhs = program.eq_rhs.clone();
        for &(i, val) in &fixed {
            for r in 0..m {
                rhs[r] -= program.eq_matrix[(r, i)] * val;
            }
        }
        let mut eq = DMatrix::from_fn(m, nr, |r, a| program.eq_matrix[(r, free[a])]);
        let mut row_scale = DVector::from_element(m, 1.0);
        for r in 0..m {
            let norm = eq.row(r).amax();
            if norm > 0.0 {
                row_scale[r] = 1.0 / norm;
                eq.row_mut(r).scale_mut(1.0 / norm);
                rhs[r] /= norm;
            }
        }

        // Null space and range of the equality block from a full SVD.
        let rows = m.max(nr);
        let mut padded = DMatrix::zeros(rows, nr);
        padded.rows_mut(0, m).copy_from(&eq);
        let (range_u, range_s, range_v, z) = if nr == 0 {
            (DMatrix::zeros(m, 0), DVector::zeros(0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        } else {
            let svd = padded.svd(true, true);
            let u_full = svd.u.expect("requested U");
            let vt = svd.v_t.expect("requested V^T");
            let smax = svd.singular_values.max();
            let tol = RANK_TOL * smax.max(1e-300) * (rows as f64).sqrt();
            let keep: Vec<usize> = (0..nr).filter(|&k| svd.singular_values[k] > tol && smax > 0.0).collect();
            let drop: Vec<usize> = (0..nr).filter(|k| !keep.contains(k)).collect();
            let ru = DMatrix::from_fn(m, keep.len(), |r, c| u_full[(r, keep[c])]);
            let rs = DVector::from_fn(keep.len(), |c, _| svd.singular_values[keep[c]]);
            let rv = DMatrix::from_fn(nr, keep.len(), |r, c| vt[(keep[c], r)]);
            let z = DMatrix::from_fn(nr, drop.len(), |r, c| vt[(drop[c], r)]);
            (ru, rs, rv, z)
        };

        // Minimum-norm particular solution and consistency of the block.
        let mut coef = range_u.transpose() * &rhs;
        for c in 0..coef.len() {
            coef[c] /= range_s[c];
        }
        let y0 = &range_v * coef;
        let eq_consistent = if m == 0 {
            true
        } else {
            let res = (&eq * &y0 - &rhs).amax();
            res <= 1e-9 * (1.0 + rhs.amax())
        };

        let k = z.ncols();
        let mut scale = DVector::from_element(nr, 1.0);
        for a in 0..nr {
            let norm2 = z.row(a).norm_squared();
            scale[a] = (1.0 / norm2.max(1.0 / SCALE_CAP)).min(SCALE_CAP);
        }
        for d in &disks {
            let avg = 0.5 * (z.row(d.i).norm_squared() + z.row(d.j).norm_squared());
            let s = (1.0 / avg.max(1.0 / SCALE_CAP)).min(SCALE_CAP);
            scale[d.i] = s;
            scale[d.j] = s;
        }
        let ztpz = if k > 0 { z.transpose() * &p * &z } else { DMatrix::zeros(0, 0) };
        let mut zs = z.clone();
        for a in 0..nr {
            zs.row_mut(a).scale_mut(scale[a]);
        }
        let ztcz = z.transpose() * zs;
        let rho = if k > 0 && ztpz.trace() > 0.0 {
            (ztpz.trace() / nr.max(1) as f64).clamp(RHO_MIN, RHO_MAX)
        } else {
            0.1
        };

        let mut q = DVector::from_fn(nr, |a, _| program.linear[free[a]]);
        for &(i, val) in &fixed {
            for a in 0..nr {
                q[a] += program.quad[(free[a], i)] * val;
            }
        }

        let mut ws = Self {
            program,
            settings,
            free,
            fixed,
            p,
            q,
            lower,
            upper,
            boxed,
            disks,
            row_scale,
            range_u,
            range_s,
            range_v,
            eq_r: eq,
            eq_rhs_r: rhs,
            eq_consistent,
            y0: y0.clone(),
            z,
            ztpz,
            ztcz,
            scale,
            rho,
            chol: None,
            y: y0.clone(),
            w: y0.clone(),
            u: DVector::zeros(nr),
            warm: false,
        };
        ws.w = ws.project(&y0);
        ws.factor();
        Ok(ws)
    }

    pub fn program(&self) -> &ConvexProgram {
        &self.program
    }

    pub fn settings_mut(&mut self) -> &mut Settings {
        &mut self.settings
    }

    /// Replaces the linear objective term, keeping the current iterate as
    /// warm start.
    pub fn set_linear(&mut self, linear: &DVector<f64>) {
        assert_eq!(linear.len(), self.program.len(), "linear term length");
        self.program.linear.copy_from(linear);
        for (a, &i) in self.free.iter().enumerate() {
            let mut v = linear[i];
            for &(f, val) in &self.fixed {
                v += self.program.quad[(i, f)] * val;
            }
            self.q[a] = v;
        }
    }

    /// Forgets the previous iterate.
    pub fn reset(&mut self) {
        self.y = self.y0.clone();
        self.w = self.project(&self.y0);
        self.u = DVector::zeros(self.free.len());
        self.warm = false;
    }

    fn factor(&mut self) {
        if self.z.ncols() == 0 {
            self.chol = None;
            return;
        }
        let h = &self.ztpz + &self.ztcz * self.rho;
        self.chol = Some(Cholesky::new(h).expect("null-space system is positive definite"));
    }

    pub(crate) fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for &a in &self.boxed {
            out[a] = out[a].clamp(self.lower[a], self.upper[a]);
        }
        for d in &self.disks {
            let norm = out[d.i].hypot(out[d.j]);
            if norm > d.radius {
                let s = d.radius / norm;
                out[d.i] *= s;
                out[d.j] *= s;
            }
        }
        out
    }

    fn penalty(&self) -> DVector<f64> {
        &self.scale * self.rho
    }

    fn residuals(&self, y: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> Residuals {
        let zt = self.z.transpose();
        let dual_vec = self.penalty().component_mul(u);
        let py = zt.clone() * (&self.p * y);
        let qz = zt.clone() * &self.q;
        let zz = zt * &dual_vec;
        Residuals {
            prim: (y - w).amax(),
            prim_scale: y.amax().max(w.amax()),
            dual: (&py + &qz + &zz).amax(),
            dual_scale: py.amax().max(qz.amax()).max(zz.amax()),
        }
    }

    pub fn solve(&mut self) -> Solution {
        let settings = self.settings;
        if !self.eq_consistent {
            return self.infeasible(0);
        }
        let nr = self.free.len();
        if self.z.ncols() == 0 {
            // The equalities pin every variable.
            let y = self.y0.clone();
            let feasible = (self.project(&y) - &y).amax() <= settings.eps_pri * (1.0 + y.amax());
            if !feasible {
                return self.infeasible(0);
            }
            let cand = Candidate {
                y,
                box_dual: DVector::zeros(nr),
                disk_dual: vec![0.0; self.disks.len()],
            };
            return self.finish(&cand, 0, Status::Optimal, false);
        }

        if settings.polish && self.warm {
            let guess = polish::active_set(self, &self.w);
            if let Some(cand) = polish::polish(self, guess, &self.w) {
                if let Some(sol) = self.accept(&cand, 0) {
                    return sol;
                }
            }
        }

        let relax = settings.relaxation;
        let mut last_rho_change = 0usize;
        let mut last_guess: Option<polish::ActiveSet> = None;
        // (merit, y, w, u) of the best iterate seen so far.
        let mut best: Option<(f64, Iterate)> = None;
        let mut du_prev = DVector::<f64>::zeros(nr);
        let mut stable = 0usize;
        let g0_base = &self.p * &self.y0;

        for iter in 1..=settings.max_iter {
            let r = self.penalty();
            let g0 = &g0_base + &self.q;
            let v = r.component_mul(&(&self.y0 - &self.w + &self.u));
            let rhs = -(self.z.transpose() * (g0 + v));
            let t = self.chol.as_ref().expect("factorised").solve(&rhs);
            self.y = &self.y0 + &self.z * t;
            let yh = &self.y * relax + &self.w * (1.0 - relax);
            self.w = self.project(&(&yh + &self.u));
            let du = &yh - &self.w;
            self.u += &du;

            // Divergence certificate: the dual increment settles on a fixed
            // nonzero direction while the primal gap persists.
            let dnorm = du.amax();
            if dnorm > settings.eps_pri * (1.0 + self.y.amax()) && (&du - &du_prev).amax() <= 1e-7 * dnorm {
                stable += 1;
            } else {
                stable = 0;
            }
            du_prev = du;
            if stable >= settings.infeasibility_window {
                return self.infeasible(iter);
            }

            if iter % settings.check_every != 0 && iter != settings.max_iter {
                continue;
            }
            let res = self.residuals(&self.y, &self.w, &self.u);
            let merit = res.prim_rel().max(res.dual_rel());
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((merit, (self.y.clone(), self.w.clone(), self.u.clone())));
            }
            let converged = res.prim_rel() <= settings.eps_pri && res.dual_rel() <= settings.eps_dual;

            if settings.polish && (converged || merit <= 1e-3) {
                let guess = polish::active_set(self, &self.w);
                if converged || last_guess.as_ref() != Some(&guess) {
                    last_guess = Some(guess.clone());
                    if let Some(cand) = polish::polish(self, guess, &self.w) {
                        if let Some(sol) = self.accept(&cand, iter) {
                            return sol;
                        }
                    }
                }
            }
            if converged {
                let cand = self.admm_candidate(&self.y.clone(), &self.w.clone(), &self.u.clone());
                self.warm = true;
                return self.finish(&cand, iter, Status::Optimal, false);
            }

            if stable < 100 && iter - last_rho_change >= 5 * settings.check_every {
                let ratio = (res.prim_rel() / res.dual_rel().max(1e-300)).sqrt();
                if ratio.is_finite() && !(0.2..=5.0).contains(&ratio) {
                    let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                    if new_rho != self.rho {
                        self.u *= self.rho / new_rho;
                        du_prev *= self.rho / new_rho;
                        self.rho = new_rho;
                        self.factor();
                        last_rho_change = iter;
                        stable = 0;
                    }
                }
            }
        }

        let (_, (y, w, u)) = best.expect("at least one residual check");
        self.y = y.clone();
        self.w = w.clone();
        self.u = u.clone();
        self.warm = true;
        let cand = self.admm_candidate(&y, &w, &u);
        self.finish(&cand, settings.max_iter, Status::MaxIter, false)
    }

    fn infeasible(&mut self, iterations: usize) -> Solution {
        self.reset();
        let cand = Candidate {
            y: self.y.clone(),
            box_dual: DVector::zeros(self.free.len()),
            disk_dual: vec![0.0; self.disks.len()],
        };
        self.finish(&cand, iterations, Status::Infeasible, false)
    }

    fn admm_candidate(&self, y: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> Candidate {
        let dual = self.penalty().component_mul(u);
        let mut box_dual = DVector::zeros(self.free.len());
        for &a in &self.boxed {
            box_dual[a] = dual[a];
        }
        let disk_dual = self
            .disks
            .iter()
            .map(|d| {
                let r2 = d.radius * d.radius;
                (dual[d.i] * w[d.i] + dual[d.j] * w[d.j]).max(0.0) / r2
            })
            .collect();
        Candidate { y: y.clone(), box_dual, disk_dual }
    }

    /// Keeps a polished candidate if it certifies, and syncs the iterate to it.
    fn accept(&mut self, cand: &Candidate, iter: usize) -> Option<Solution> {
        let sol = self.finish(cand, iter, Status::Optimal, true);
        if sol.primal_residual <= self.settings.eps_pri && sol.dual_residual <= self.settings.eps_dual {
            let r = self.penalty();
            let mut z = cand.box_dual.clone();
            for (d, mu) in self.disks.iter().zip(&cand.disk_dual) {
                z[d.i] = mu * cand.y[d.i];
                z[d.j] = mu * cand.y[d.j];
            }
            self.y = cand.y.clone();
            self.w = self.project(&cand.y);
            self.u = z.component_div(&r);
            self.warm = true;
            Some(sol)
        } else {
            None
        }
    }

    /// Expands a reduced candidate to the full program and certifies it.
    fn finish(&self, cand: &Candidate, iterations: usize, status: Status, polished: bool) -> Solution {
        let prog = &self.program;
        let n = prog.len();
        let mut y = DVector::zeros(n);
        for (a, &i) in self.free.iter().enumerate() {
            y[i] = cand.y[a];
        }
        for &(i, val) in &self.fixed {
            y[i] = val;
        }

        // Gradient of the Lagrangian without the equality term, free part.
        let grad_full = &prog.quad * &y + &prog.linear;
        let mut g = DVector::from_fn(self.free.len(), |a, _| grad_full[self.free[a]] + cand.box_dual[a]);
        for (d, mu) in self.disks.iter().zip(&cand.disk_dual) {
            g[d.i] += mu * cand.y[d.i];
            g[d.j] += mu * cand.y[d.j];
        }
        // Least-squares equality multipliers: E_r' nu_r = -g.
        let mut coef = self.range_v.transpose() * (-&g);
        for c in 0..coef.len() {
            coef[c] /= self.range_s[c];
        }
        let nu_r = &self.range_u * coef;
        let eq_dual = nu_r.component_mul(&self.row_scale);
        let stat_vec = &g + self.eq_r.transpose() * &nu_r;
        let stationarity = if self.z.ncols() == 0 { 0.0 } else { stat_vec.amax() };

        let mut box_dual = DVector::zeros(n);
        for (a, &i) in self.free.iter().enumerate() {
            box_dual[i] = cand.box_dual[a];
        }
        let eq_t = prog.eq_matrix.transpose() * &eq_dual;
        for &(i, _) in &self.fixed {
            box_dual[i] = -(grad_full[i] + eq_t[i]);
        }

        let mut primal = if prog.eq_matrix.nrows() > 0 {
            (&prog.eq_matrix * &y - &prog.eq_rhs).amax()
        } else {
            0.0
        };
        let mut scaled_primal = if self.eq_r.nrows() > 0 {
            (&self.eq_r * &cand.y - &self.eq_rhs_r).amax()
        } else {
            0.0
        };
        let mut comp: f64 = 0.0;
        for &a in &self.boxed {
            let (yv, lo, hi, zd) = (cand.y[a], self.lower[a], self.upper[a], cand.box_dual[a]);
            let viol = (lo - yv).max(yv - hi).max(0.0);
            primal = primal.max(viol);
            scaled_primal = scaled_primal.max(viol);
            let gap = if zd < 0.0 { yv - lo } else { hi - yv };
            let term = if gap.is_finite() { zd.abs() * gap.abs() } else { zd.abs() };
            comp = comp.max(term);
        }
        for (d, mu) in self.disks.iter().zip(&cand.disk_dual) {
            let norm = cand.y[d.i].hypot(cand.y[d.j]);
            let viol = (norm - d.radius).max(0.0);
            primal = primal.max(viol);
            scaled_primal = scaled_primal.max(viol);
            comp = comp.max(mu * (d.radius - norm).abs());
        }

        let zfree = &cand.box_dual;
        let dual_scale = grad_full.amax().max(zfree.amax()).max(prog.linear.amax());
        let disk_dual = cand.disk_dual.clone();
        let objective = prog.objective(&y);
        Solution {
            primal_residual: scaled_primal / (1.0 + y.amax()),
            dual_residual: stationarity / (1.0 + dual_scale),
            kkt: Kkt {
                primal,
                stationarity,
                complementarity: comp,
            },
            primal: y,
            eq_dual,
            box_dual,
            disk_dual,
            iterations,
            status,
            objective,
            polished,
        }
    }
}
