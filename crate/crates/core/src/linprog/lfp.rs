use super::{dot, solve_lp, LinearProgram, LpSolution, LpStatus};
use crate::error::{Error, Result};

/// The affine function `coef · x + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineForm {
    pub coef: Vec<f64>,
    pub constant: f64,
}

impl AffineForm {
    pub fn new(coef: Vec<f64>, constant: f64) -> Self {
        AffineForm { coef, constant }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.coef, x) + self.constant
    }
}

/// Smallest denominator value accepted as strictly positive.
const DEN_FLOOR: f64 = 1e-12;

/// Minimizes `num(x) / den(x)` over the feasible set of `feasible` (its
/// objective is ignored).
///
/// The denominator is first minimized over the feasible set; if it can reach
/// zero the problem is rejected with a domain error. Otherwise the
/// Charnes-Cooper substitution `y = t·x`, `t = 1/den(x)` turns the ratio into
/// a linear program in `(y, t)` whose solution is mapped back to `x`.
pub fn solve_lfp(num: &AffineForm, den: &AffineForm, feasible: &LinearProgram) -> Result<LpSolution> {
    feasible.validate()?;
    let n = feasible.n_vars();
    if num.coef.len() != n || den.coef.len() != n {
        return Err(Error::Structural(format!(
            "ratio forms have {} and {} coefficients for {n} variables",
            num.coef.len(),
            den.coef.len()
        )));
    }

    let den_lp = feasible.clone().with_objective(den.coef.clone());
    let den_min = solve_lp(&den_lp)?;
    match den_min.status {
        LpStatus::Infeasible => return Ok(den_min),
        LpStatus::Unbounded => return Err(Error::Domain("denominator is unbounded below on the feasible set".into())),
        LpStatus::Optimal => {
            if den_min.value + den.constant <= DEN_FLOOR {
                return Err(Error::Domain(format!(
                    "denominator reaches {:.3e} on the feasible set",
                    den_min.value + den.constant
                )));
            }
        }
    }

    // Variables (y_0..y_{n-1}, t).
    let mut cc = LinearProgram::new(n + 1);
    cc.free_all();
    cc.set_bounds(n, 0.0, f64::INFINITY);
    cc.objective = num.coef.iter().copied().chain([num.constant]).collect();
    let homog = |row: &[f64], rhs: f64| -> Vec<f64> { row.iter().copied().chain([-rhs]).collect() };
    for (row, &b) in feasible.a_eq.iter().zip(&feasible.b_eq) {
        cc.add_eq(homog(row, b), 0.0);
    }
    for (row, &b) in feasible.a_ub.iter().zip(&feasible.b_ub) {
        cc.add_ub(homog(row, b), 0.0);
    }
    for (j, &(lo, hi)) in feasible.bounds.iter().enumerate() {
        let mut ylo = f64::NEG_INFINITY;
        let mut yhi = f64::INFINITY;
        if lo == 0.0 {
            ylo = 0.0;
        } else if lo.is_finite() {
            let mut r = vec![0.0; n + 1];
            r[j] = -1.0;
            r[n] = lo;
            cc.add_ub(r, 0.0);
        }
        if hi == 0.0 {
            yhi = 0.0;
        } else if hi.is_finite() {
            let mut r = vec![0.0; n + 1];
            r[j] = 1.0;
            r[n] = -hi;
            cc.add_ub(r, 0.0);
        }
        cc.set_bounds(j, ylo, yhi);
    }
    cc.add_eq(den.coef.iter().copied().chain([den.constant]).collect(), 1.0);

    let sol = solve_lp(&cc)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Ok(LpSolution::infeasible(None)),
        LpStatus::Unbounded => return Ok(LpSolution::unbounded()),
    }
    let yt = sol.point.expect("optimal solutions carry a point");
    let t = yt[n];
    if t <= 1e-14 {
        return Err(Error::Solver("linear-fractional infimum is approached only along an unbounded ray".into()));
    }
    let x: Vec<f64> = yt[..n].iter().map(|v| v / t).collect();
    Ok(LpSolution { status: LpStatus::Optimal, value: num.eval(&x) / den.eval(&x), point: Some(x), certificate: None })
}
