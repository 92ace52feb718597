//! Exact active-set refinement.
//!
//! Given a guess of which bounds and disks are active, the reduced problem in
//! null-space coordinates becomes an equality-constrained quadratic program
//! with a few quadratic (disk) equalities. Its KKT system is solved by Newton's
//! method; multiplier signs and inactive constraints are then checked and the
//! guess corrected until it is consistent.

use nalgebra::{DMatrix, DVector};

use super::admm::{Candidate, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ActiveSet {
    boxes: Vec<(usize, Side)>,
    disks: Vec<usize>,
}

const MAX_ROUNDS: usize = 30;
const MAX_NEWTON: usize = 50;

/// Bounds and disks touched by the projected iterate `w`.
pub(crate) fn active_set(ws: &Workspace, w: &DVector<f64>) -> ActiveSet {
    let mut boxes = Vec::new();
    for &a in &ws.boxed {
        let tol = 1e-12 * (1.0 + w[a].abs());
        if w[a] <= ws.lower[a] + tol {
            boxes.push((a, Side::Lower));
        } else if w[a] >= ws.upper[a] - tol {
            boxes.push((a, Side::Upper));
        }
    }
    let disks = ws
        .disks
        .iter()
        .enumerate()
        .filter(|(_, d)| w[d.i].hypot(w[d.j]) >= d.radius * (1.0 - 1e-9))
        .map(|(k, _)| k)
        .collect();
    ActiveSet { boxes, disks }
}

fn solve_linear(j: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(x) = j.clone().lu().solve(rhs) {
        let res = (j * &x - rhs).amax();
        if x.iter().all(|v| v.is_finite()) && res <= 1e-9 * (1.0 + rhs.amax()) {
            return Some(x);
        }
    }
    let svd = j.clone().svd(true, true);
    let tol = 1e-13 * svd.singular_values.max().max(1e-300) * j.nrows() as f64;
    let x = svd.solve(rhs, tol).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Newton iteration on the KKT system of the equality-constrained problem.
fn newton(ws: &Workspace, set: &ActiveSet, t_start: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let z = &ws.z;
    let k = z.ncols();
    let mb = set.boxes.len();
    let md = set.disks.len();
    let dim = k + mb + md;
    let g0 = z.transpose() * (&ws.p * &ws.y0 + &ws.q);

    let mut t = t_start.clone();
    let mut nu = DVector::<f64>::zeros(mb);
    let mut mu = DVector::<f64>::zeros(md);

    for _ in 0..MAX_NEWTON {
        let y = &ws.y0 + z * &t;
        let mut f = DVector::zeros(dim);
        let mut jac = DMatrix::zeros(dim, dim);

        let mut f1 = &ws.ztpz * &t + &g0;
        let mut h = ws.ztpz.clone();
        for (c, &(a, side)) in set.boxes.iter().enumerate() {
            let row = z.row(a);
            f1 += row.transpose() * nu[c];
            let bound = match side {
                Side::Lower => ws.lower[a],
                Side::Upper => ws.upper[a],
            };
            f[k + c] = y[a] - bound;
            for s in 0..k {
                jac[(k + c, s)] = row[s];
                jac[(s, k + c)] = row[s];
            }
        }
        for (c, &di) in set.disks.iter().enumerate() {
            let d = ws.disks[di];
            let (ri, rj) = (z.row(d.i), z.row(d.j));
            let grad = ri.transpose() * y[d.i] + rj.transpose() * y[d.j];
            f1 += &grad * mu[c];
            h += (ri.transpose() * ri + rj.transpose() * rj) * mu[c];
            f[k + mb + c] = 0.5 * (y[d.i] * y[d.i] + y[d.j] * y[d.j] - d.radius * d.radius);
            for s in 0..k {
                jac[(k + mb + c, s)] = grad[s];
                jac[(s, k + mb + c)] = grad[s];
            }
        }
        f.rows_mut(0, k).copy_from(&f1);
        jac.view_mut((0, 0), (k, k)).copy_from(&h);

        let step = solve_linear(&jac, &(-&f))?;
        t += step.rows(0, k);
        nu += step.rows(k, mb);
        mu += step.rows(k + mb, md);

        // Multipliers follow from t linearly; converge on the primal step.
        if step.rows(0, k).amax() <= 1e-13 * (1.0 + t.amax()) || md == 0 {
            if md == 0 {
                // Linear KKT system: one exact step, optionally refined once.
                let y = &ws.y0 + z * &t;
                let resid = residual(ws, set, &t, &nu, &mu, &y, &g0);
                if resid > 1e-10 * (1.0 + g0.amax()) {
                    continue;
                }
            }
            return Some((t, nu, mu));
        }
    }
    None
}

fn residual(
    ws: &Workspace,
    set: &ActiveSet,
    t: &DVector<f64>,
    nu: &DVector<f64>,
    mu: &DVector<f64>,
    y: &DVector<f64>,
    g0: &DVector<f64>,
) -> f64 {
    let z = &ws.z;
    let mut f1 = &ws.ztpz * t + g0;
    for (c, &(a, _)) in set.boxes.iter().enumerate() {
        f1 += z.row(a).transpose() * nu[c];
    }
    for (c, &di) in set.disks.iter().enumerate() {
        let d = ws.disks[di];
        f1 += (z.row(d.i).transpose() * y[d.i] + z.row(d.j).transpose() * y[d.j]) * mu[c];
    }
    f1.amax()
}

/// Refines the guess `set`, starting Newton from the point `start`.
pub(crate) fn polish(ws: &Workspace, mut set: ActiveSet, start: &DVector<f64>) -> Option<Candidate> {
    let z = &ws.z;
    let mut t = z.transpose() * (start - &ws.y0);
    let mut seen: Vec<ActiveSet> = Vec::new();
    let dual_tol = 1e-9 * (1.0 + ws.q.amax() + (&ws.p * &ws.y0).amax());

    for _ in 0..MAX_ROUNDS {
        if seen.contains(&set) {
            return None;
        }
        seen.push(set.clone());
        let (tn, nu, mu) = newton(ws, &set, &t)?;
        t = tn;
        let y = &ws.y0 + z * &t;

        // Most wrong-signed multiplier, if any.
        let mut worst: Option<(f64, bool, usize)> = None;
        for (c, &(_, side)) in set.boxes.iter().enumerate() {
            let wrong = match side {
                Side::Lower => nu[c],
                Side::Upper => -nu[c],
            };
            if wrong > dual_tol && worst.is_none_or(|w| wrong > w.0) {
                worst = Some((wrong, true, c));
            }
        }
        for (c, &m) in mu.iter().enumerate() {
            if -m > dual_tol && worst.is_none_or(|w| -m > w.0) {
                worst = Some((-m, false, c));
            }
        }

        // Violated inactive constraints.
        let mut added = false;
        let mut next = set.clone();
        for &a in &ws.boxed {
            if set.boxes.iter().any(|&(b, _)| b == a) {
                continue;
            }
            let tol = 1e-10 * (1.0 + y[a].abs());
            if y[a] < ws.lower[a] - tol {
                next.boxes.push((a, Side::Lower));
                added = true;
            } else if y[a] > ws.upper[a] + tol {
                next.boxes.push((a, Side::Upper));
                added = true;
            }
        }
        for (di, d) in ws.disks.iter().enumerate() {
            if !set.disks.contains(&di) && y[d.i].hypot(y[d.j]) > d.radius * (1.0 + 1e-10) {
                next.disks.push(di);
                added = true;
            }
        }

        match worst {
            None if !added => {
                let mut box_dual = DVector::zeros(ws.free.len());
                for (c, &(a, side)) in set.boxes.iter().enumerate() {
                    box_dual[a] = match side {
                        Side::Lower => nu[c].min(0.0),
                        Side::Upper => nu[c].max(0.0),
                    };
                }
                let mut disk_dual = vec![0.0; ws.disks.len()];
                for (c, &di) in set.disks.iter().enumerate() {
                    disk_dual[di] = mu[c].max(0.0);
                }
                return Some(Candidate { y, box_dual, disk_dual });
            }
            Some((_, is_box, c)) if !added => {
                if is_box {
                    next.boxes.remove(c);
                } else {
                    next.disks.remove(c);
                }
            }
            _ => {}
        }
        next.boxes.sort();
        next.disks.sort();
        set = next;
    }
    None
}
