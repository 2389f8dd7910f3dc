use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{dot, solve_lp, LinearProgram, LpStatus};
use crate::error::{Error, Result};

/// Identifies one constraint of a [`LinearProgram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstraintRef {
    Eq(usize),
    Ub(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: LpStatus,
    pub value: f64,
    pub point: Option<Vec<f64>>,
    /// Constraints holding with equality at the optimum (equalities included).
    pub active: Vec<ConstraintRef>,
}

struct Ineq {
    a: Vec<f64>,
    b: f64,
    tag: ConstraintRef,
}

/// Relative tolerance used for ranks and null spaces.
const RANK_TOL: f64 = 1e-10;

fn matrix_from_rows(rows: &[&[f64]], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j])
}

/// Orthonormal basis of `{p : A p = 0}` as the columns of an `n × r` matrix.
fn null_space(rows: &[&[f64]], n: usize) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::identity(n, n);
    }
    let m = rows.len().max(n);
    let a = DMatrix::from_fn(m, n, |i, j| if i < rows.len() { rows[i][j] } else { 0.0 });
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let tol = RANK_TOL * smax.max(1.0);
    let keep: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= tol).collect();
    DMatrix::from_fn(n, keep.len(), |r, c| vt[(keep[c], r)])
}

/// Numerical rank of a set of row vectors.
pub(crate) fn row_rank(rows: &[&[f64]], n: usize) -> usize {
    if rows.is_empty() || n == 0 {
        return 0;
    }
    let a = matrix_from_rows(rows, n);
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    let tol = RANK_TOL * smax.max(1.0);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

fn check_psd(q: &DMatrix<f64>) -> Result<()> {
    let n = q.nrows();
    let scale = q.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (q[(i, j)] - q[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::Domain("quadratic matrix is not symmetric".into()));
            }
        }
    }
    if n > 0 {
        let eig = SymmetricEigen::new(q.clone());
        let min = eig.eigenvalues.min();
        if min < -1e-9 * scale {
            return Err(Error::Domain(format!("quadratic matrix is not positive semidefinite (eigenvalue {min:.3e})")));
        }
    }
    Ok(())
}

/// Minimizes `½x'Qx + c'x` over the feasible set of `feasible` (its objective
/// is ignored) with a primal active-set method.
///
/// The iteration starts from an LP vertex with the constraints tight there as
/// the initial working set. Each step minimizes the quadratic on the
/// null space of the working set; directions of zero curvature and strict
/// descent are followed as rays, so singular `Q` is handled.
pub fn solve_qp(q: &[Vec<f64>], c: &[f64], feasible: &LinearProgram) -> Result<QpSolution> {
    feasible.validate()?;
    let n = feasible.n_vars();
    if q.len() != n || q.iter().any(|r| r.len() != n) || c.len() != n {
        return Err(Error::Structural(format!("quadratic data do not match {n} variables")));
    }
    let qm = DMatrix::from_fn(n, n, |i, j| q[i][j]);
    check_psd(&qm)?;

    let start = solve_lp(&feasible.clone().with_objective(vec![0.0; n]))?;
    if start.status == LpStatus::Infeasible {
        return Ok(QpSolution { status: LpStatus::Infeasible, value: f64::INFINITY, point: None, active: vec![] });
    }
    let mut x = DVector::from_vec(start.point.expect("feasible start"));

    let eqs: Vec<&[f64]> = feasible.a_eq.iter().map(|r| r.as_slice()).collect();
    let mut ineqs: Vec<Ineq> = feasible
        .a_ub
        .iter()
        .zip(&feasible.b_ub)
        .enumerate()
        .map(|(i, (a, &b))| Ineq { a: a.clone(), b, tag: ConstraintRef::Ub(i) })
        .collect();
    for (j, &(lo, hi)) in feasible.bounds.iter().enumerate() {
        if lo.is_finite() {
            let mut a = vec![0.0; n];
            a[j] = -1.0;
            ineqs.push(Ineq { a, b: -lo, tag: ConstraintRef::Lower(j) });
        }
        if hi.is_finite() {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            ineqs.push(Ineq { a, b: hi, tag: ConstraintRef::Upper(j) });
        }
    }
    let tight = |x: &DVector<f64>, k: &Ineq| dot(&k.a, x.as_slice()) >= k.b - 1e-9 * (1.0 + k.b.abs());

    // Initial working set: tight constraints that are independent of those
    // already chosen.
    let mut working: Vec<usize> = Vec::new();
    {
        let mut base_rank = row_rank(&eqs, n);
        for (i, k) in ineqs.iter().enumerate() {
            if !tight(&x, k) {
                continue;
            }
            let mut rows = eqs.clone();
            rows.extend(working.iter().map(|&w| ineqs[w].a.as_slice()));
            rows.push(k.a.as_slice());
            let r = row_rank(&rows, n);
            if r > base_rank {
                working.push(i);
                base_rank = r;
            }
        }
    }

    let cvec = DVector::from_column_slice(c);
    let max_iter = 100 + 50 * (n + ineqs.len());
    let mut converged = false;
    for _ in 0..max_iter {
        let mut rows = eqs.clone();
        rows.extend(working.iter().map(|&w| ineqs[w].a.as_slice()));
        let z = null_space(&rows, n);
        let g = &qm * &x + &cvec;
        let gscale = 1.0 + g.amax();

        let mut p = DVector::zeros(n);
        let mut is_ray = false;
        if z.ncols() > 0 {
            let h = z.transpose() * &qm * &z;
            let rg = z.transpose() * &g;
            let eig = SymmetricEigen::new(h);
            let hmax = eig.eigenvalues.amax();
            let htol = RANK_TOL * hmax.max(1.0);
            let ug = eig.eigenvectors.transpose() * &rg;
            let mut ray = DVector::zeros(z.ncols());
            for i in 0..ug.len() {
                if eig.eigenvalues[i] <= htol && ug[i].abs() > 1e-9 * gscale {
                    ray -= eig.eigenvectors.column(i) * ug[i];
                    is_ray = true;
                }
            }
            if is_ray {
                p = &z * ray;
            } else {
                let mut u = DVector::zeros(z.ncols());
                for i in 0..ug.len() {
                    if eig.eigenvalues[i] > htol {
                        u -= eig.eigenvectors.column(i) * (ug[i] / eig.eigenvalues[i]);
                    }
                }
                p = &z * u;
            }
        }

        if !is_ray && p.amax() <= 1e-12 * (1.0 + x.amax()) {
            // Stationary on the working set: inspect the multipliers.
            if working.is_empty() {
                converged = true;
                break;
            }
            let at = matrix_from_rows(&rows, n).transpose();
            let lambda = at
                .svd(true, true)
                .solve(&(-&g), 1e-12)
                .map_err(|e| Error::Solver(format!("multiplier solve failed: {e}")))?;
            let ne = eqs.len();
            let (mut worst, mut worst_val) = (None, -1e-9 * gscale);
            for (slot, _) in working.iter().enumerate() {
                let l = lambda[ne + slot];
                if l < worst_val {
                    worst_val = l;
                    worst = Some(slot);
                }
            }
            match worst {
                Some(slot) => {
                    working.remove(slot);
                }
                None => {
                    converged = true;
                    break;
                }
            }
            continue;
        }

        // Ratio test against constraints outside the working set.
        let pnorm = p.norm();
        let mut step = if is_ray { f64::INFINITY } else { 1.0 };
        let mut blocking = None;
        for (i, k) in ineqs.iter().enumerate() {
            if working.contains(&i) {
                continue;
            }
            let ap = dot(&k.a, p.as_slice());
            let anorm = k.a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ap <= 1e-12 * anorm * pnorm {
                continue;
            }
            let s = ((k.b - dot(&k.a, x.as_slice())) / ap).max(0.0);
            if s < step {
                step = s;
                blocking = Some(i);
            }
        }
        if step.is_infinite() {
            return Ok(QpSolution {
                status: LpStatus::Unbounded,
                value: f64::NEG_INFINITY,
                point: None,
                active: vec![],
            });
        }
        x += &p * step;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    if !converged {
        return Err(Error::Solver("active-set iteration limit reached".into()));
    }

    let xs = x.as_slice().to_vec();
    let value = 0.5 * x.dot(&(&qm * &x)) + cvec.dot(&x);
    let mut active: Vec<ConstraintRef> = (0..eqs.len()).map(ConstraintRef::Eq).collect();
    active.extend(ineqs.iter().filter(|k| tight(&x, k)).map(|k| k.tag));
    Ok(QpSolution { status: LpStatus::Optimal, value, point: Some(xs), active })
}
