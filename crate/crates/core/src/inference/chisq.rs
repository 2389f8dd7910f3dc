use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{check_alpha, MomentSystem, TestResult};
use crate::error::{Error, Result};
use crate::linprog::{row_rank, solve_qp, ConstraintRef, LinearProgram, LpStatus};

/// Eigenvalues of `Cov(p̂)` below this fraction of the largest are treated
/// as exact zeros.
const PINV_RIDGE: f64 = 1e-10;

pub(super) struct ChisqFit {
    pub statistic: f64,
    pub df: usize,
}

impl ChisqFit {
    pub fn critical_value(&self, alpha: f64) -> f64 {
        if self.df == 0 {
            return 0.0;
        }
        ChiSquared::new(self.df as f64).expect("positive df").inverse_cdf(1.0 - alpha)
    }

    pub fn p_value(&self) -> f64 {
        if self.df == 0 {
            return 1.0;
        }
        1.0 - ChiSquared::new(self.df as f64).expect("positive df").cdf(self.statistic)
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.df > 0 && self.statistic > self.critical_value(alpha)
    }
}

/// Projection of `p̂` onto `{μ : ∃ω, C₁ω − C₂μ ≥ 0}` in the metric `Cov(p̂)⁺`.
///
/// Directions with zero variance are held fixed (`Eμ = Ep̂`). The reference
/// chi-squared has as many degrees of freedom as the active constraints
/// restrict `μ` beyond what `ω` and `E` absorb:
/// `rank[A_ω A_μ; 0 E] − rank A_ω − rank E` over the active rows.
pub(super) fn fit(system: &MomentSystem) -> Result<ChisqFit> {
    let n_p = system.p_hat.len();
    let n_w = system.n_nuisance();
    let n = n_w + n_p;

    let cov = DMatrix::from_fn(n_p, n_p, |i, j| 0.5 * (system.cov[i][j] + system.cov[j][i]));
    let eig = SymmetricEigen::new(cov);
    let lmax = eig.eigenvalues.max().max(0.0);
    if lmax <= 0.0 {
        return Err(Error::Degenerate("estimated covariance is zero".into()));
    }
    let tol = PINV_RIDGE * lmax;
    let mut w = DMatrix::<f64>::zeros(n_p, n_p);
    let mut fixed: Vec<Vec<f64>> = Vec::new();
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if l > tol {
            w += v * v.transpose() / l;
        } else {
            fixed.push(v.iter().copied().collect());
        }
    }

    // Variables (ω, e) with μ = p̂ + e.
    let c2p = system.c2_times(&system.p_hat);
    let mut lp = LinearProgram::new(n);
    lp.free_all();
    if n_w > 0 {
        for j in 0..system.k * system.k {
            lp.set_bounds(j, 0.0, f64::INFINITY);
        }
    }
    let stacked: Vec<Vec<f64>> = system
        .c1
        .iter()
        .zip(&system.c2)
        .map(|(a, c)| {
            let mut row = vec![0.0; n];
            row[..a.len()].copy_from_slice(a);
            for (j, v) in c.iter().enumerate() {
                row[n_w + j] = -v;
            }
            row
        })
        .collect();
    for (row, &b) in stacked.iter().zip(&c2p) {
        lp.add_ge(row.clone(), b);
    }
    let fixed_rows: Vec<Vec<f64>> = fixed
        .iter()
        .map(|v| {
            let mut row = vec![0.0; n];
            row[n_w..].copy_from_slice(v);
            row
        })
        .collect();
    for row in &fixed_rows {
        lp.add_eq(row.clone(), 0.0);
    }

    let mut qm = vec![vec![0.0; n]; n];
    for i in 0..n_p {
        for j in 0..n_p {
            qm[n_w + i][n_w + j] = 2.0 * 0.5 * (w[(i, j)] + w[(j, i)]);
        }
    }
    let sol = solve_qp(&qm, &vec![0.0; n], &lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(Error::Degenerate(
                "no null-consistent law shares the zero-variance directions of the estimate".into(),
            ))
        }
        LpStatus::Unbounded => return Err(Error::Solver("chi-squared projection is unbounded".into())),
    }

    let mut full: Vec<Vec<f64>> = Vec::new();
    let mut omega: Vec<Vec<f64>> = Vec::new();
    for c in &sol.active {
        let row = match *c {
            // `add_ge` stores rows negated; the sign does not affect ranks.
            ConstraintRef::Ub(j) => stacked[j].clone(),
            ConstraintRef::Lower(i) | ConstraintRef::Upper(i) => {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r
            }
            ConstraintRef::Eq(_) => continue,
        };
        omega.push(row[..n_w].to_vec());
        full.push(row);
    }
    let full_refs: Vec<&[f64]> = full.iter().chain(&fixed_rows).map(|r| r.as_slice()).collect();
    let omega_refs: Vec<&[f64]> = omega.iter().map(|r| r.as_slice()).collect();
    let fixed_refs: Vec<&[f64]> = fixed_rows.iter().map(|r| &r[n_w..]).collect();
    let df =
        row_rank(&full_refs, n).saturating_sub(row_rank(&omega_refs, n_w)).saturating_sub(row_rank(&fixed_refs, n_p));
    let statistic = if sol.value < 1e-9 { 0.0 } else { sol.value };
    Ok(ChisqFit { statistic, df })
}

/// Conditional chi-squared test: the weighted distance from `p̂` to the null
/// set compared with a chi-squared whose degrees of freedom count the
/// binding constraints. With no binding constraint the test never rejects.
pub fn test_conditional_chisq(system: &MomentSystem, alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let f = fit(system)?;
    let mut notes = system.warnings.clone();
    if f.df == 0 {
        notes.push("no binding constraint at the projection (df = 0); the test does not reject".into());
    }
    Ok(TestResult {
        method: "cond-chisq".into(),
        statistic: f.statistic,
        critical_value: f.critical_value(alpha),
        p_value: f.p_value(),
        reject: f.rejects(alpha),
        alpha,
        draws: None,
        seed: None,
        df: Some(f.df),
        n_eff: system.n_eff,
        n_moments: system.n_rows(),
        nuisance_free: system.nuisance_free,
        restriction: system.restriction.clone(),
        relaxed_dbar: system.relaxed_dbar,
        notes,
    })
}
