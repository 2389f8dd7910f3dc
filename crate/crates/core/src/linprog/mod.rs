//! Dense solvers for the small optimization problems used throughout the crate.
//!
//! * [`solve_lp`] is a two-phase tableau simplex with Bland's rule. Optimal
//!   solutions carry a dual certificate and infeasible ones a Farkas ray.
//! * [`solve_lfp`] minimizes a ratio of affine forms through the
//!   Charnes-Cooper change of variables.
//! * [`solve_qp`] is a primal active-set method for convex quadratics that
//!   tolerates singular Hessians.
//!
//! Every routine is a pure function of its input, so results are bit-for-bit
//! reproducible and the solvers can be called from many threads.

mod lfp;
mod qp;
mod simplex;

pub use lfp::{solve_lfp, AffineForm};
pub(crate) use qp::row_rank;
pub use qp::{solve_qp, ConstraintRef, QpSolution};
pub use simplex::solve_lp;

use crate::error::{Error, Result};

/// Pivot elements smaller than this are never used.
pub const PIVOT_TOL: f64 = 1e-10;
/// Absolute tolerance for primal feasibility.
pub const FEAS_TOL: f64 = 1e-9;

/// `min c'x` subject to `A_eq x = b_eq`, `A_ub x <= b_ub`, `lo <= x <= hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_ub: Vec<Vec<f64>>,
    pub b_ub: Vec<f64>,
    /// Per-variable `(lo, hi)`; infinite values are allowed.
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// A program in `n` nonnegative variables with a zero objective.
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: vec![0.0; n],
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_ub: Vec::new(),
            b_ub: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn with_objective(mut self, c: Vec<f64>) -> Self {
        self.objective = c;
        self
    }

    pub fn add_eq(&mut self, row: Vec<f64>, rhs: f64) {
        self.a_eq.push(row);
        self.b_eq.push(rhs);
    }

    pub fn add_ub(&mut self, row: Vec<f64>, rhs: f64) {
        self.a_ub.push(row);
        self.b_ub.push(rhs);
    }

    /// Adds `row · x >= rhs` as a negated upper-bound row.
    pub fn add_ge(&mut self, row: Vec<f64>, rhs: f64) {
        self.a_ub.push(row.into_iter().map(|v| -v).collect());
        self.b_ub.push(-rhs);
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.bounds[j] = (lo, hi);
    }

    /// Makes every variable free.
    pub fn free_all(&mut self) {
        for b in &mut self.bounds {
            *b = (f64::NEG_INFINITY, f64::INFINITY);
        }
    }

    /// Checks the dimension invariants and rejects NaNs.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        if self.bounds.len() != n {
            return Err(Error::Structural(format!("{} variable bounds for {} variables", self.bounds.len(), n)));
        }
        if self.a_eq.len() != self.b_eq.len() || self.a_ub.len() != self.b_ub.len() {
            return Err(Error::Structural("constraint rows and right-hand sides differ in length".into()));
        }
        for (i, row) in self.a_eq.iter().chain(self.a_ub.iter()).enumerate() {
            if row.len() != n {
                return Err(Error::Structural(format!("constraint row {i} has {} columns, expected {n}", row.len())));
            }
        }
        let finite_or_inf = |v: &f64| !v.is_nan();
        let ok = self.objective.iter().all(|v| v.is_finite())
            && self.a_eq.iter().flatten().all(|v| v.is_finite())
            && self.a_ub.iter().flatten().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite())
            && self.b_ub.iter().all(|v| v.is_finite())
            && self.bounds.iter().all(|(l, h)| finite_or_inf(l) && finite_or_inf(h))
            && self.bounds.iter().all(|(l, h)| *l != f64::INFINITY && *h != f64::NEG_INFINITY);
        if !ok {
            return Err(Error::Structural("non-finite coefficient in linear program".into()));
        }
        Ok(())
    }

    /// Largest violation of any constraint or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, b) in self.a_eq.iter().zip(&self.b_eq) {
            worst = worst.max((dot(row, x) - b).abs());
        }
        for (row, b) in self.a_ub.iter().zip(&self.b_ub) {
            worst = worst.max(dot(row, x) - b);
        }
        for (xj, (lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - xj).max(xj - hi);
        }
        worst
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Multipliers for the Lagrangian dual of a [`LinearProgram`].
///
/// With `λ = eq`, `μ = ub`, `α = lower`, `β = upper` the dual program is
/// `max b_eq'λ + b_ub'μ + lo'α − hi'β` subject to
/// `A_eq'λ + A_ub'μ + α − β = c`, `μ ≤ 0`, `α, β ≥ 0`.
/// For an infeasible program the same vectors with `c = 0` and a strictly
/// positive value form a Farkas ray.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub eq: Vec<f64>,
    pub ub: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DualCertificate {
    /// Dual objective value; infinite bounds contribute nothing.
    pub fn value(&self, lp: &LinearProgram) -> f64 {
        let mut v = dot(&self.eq, &lp.b_eq) + dot(&self.ub, &lp.b_ub);
        for (j, (lo, hi)) in lp.bounds.iter().enumerate() {
            if lo.is_finite() {
                v += lo * self.lower[j];
            }
            if hi.is_finite() {
                v -= hi * self.upper[j];
            }
        }
        v
    }

    /// Largest violation of stationarity against cost vector `c` and of the
    /// sign conditions. Multipliers attached to infinite bounds count as
    /// violations.
    pub fn residual(&self, lp: &LinearProgram, c: &[f64]) -> f64 {
        let n = lp.n_vars();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let mut s = self.lower[j] - self.upper[j];
            for (i, row) in lp.a_eq.iter().enumerate() {
                s += row[j] * self.eq[i];
            }
            for (i, row) in lp.a_ub.iter().enumerate() {
                s += row[j] * self.ub[i];
            }
            worst = worst.max((s - c[j]).abs());
            let (lo, hi) = lp.bounds[j];
            worst = worst.max(-self.lower[j]).max(-self.upper[j]);
            if !lo.is_finite() {
                worst = worst.max(self.lower[j].abs());
            }
            if !hi.is_finite() {
                worst = worst.max(self.upper[j].abs());
            }
        }
        for mu in &self.ub {
            worst = worst.max(*mu);
        }
        worst
    }

    /// True when this certificate proves `lp` infeasible.
    pub fn proves_infeasible(&self, lp: &LinearProgram) -> bool {
        let zero = vec![0.0; lp.n_vars()];
        self.residual(lp, &zero) <= 1e-8 && self.value(lp) > 1e-9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimal value; `+inf` when infeasible and `-inf` when unbounded.
    pub value: f64,
    /// Present iff the status is optimal.
    pub point: Option<Vec<f64>>,
    /// Dual multipliers when optimal, Farkas ray when infeasible.
    pub certificate: Option<DualCertificate>,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    /// The optimal point, or an error naming the status.
    pub fn into_point(self) -> Result<Vec<f64>> {
        match (self.status, self.point) {
            (LpStatus::Optimal, Some(p)) => Ok(p),
            (status, _) => Err(Error::Solver(format!("expected an optimal solution, got {status:?}"))),
        }
    }

    pub(crate) fn infeasible(certificate: Option<DualCertificate>) -> Self {
        LpSolution { status: LpStatus::Infeasible, value: f64::INFINITY, point: None, certificate }
    }

    pub(crate) fn unbounded() -> Self {
        LpSolution { status: LpStatus::Unbounded, value: f64::NEG_INFINITY, point: None, certificate: None }
    }
}
