use nalgebra::{DMatrix, DVector};

use super::{dot, DualCertificate, LinearProgram, LpSolution, LpStatus, FEAS_TOL, PIVOT_TOL};
use crate::error::{Error, Result};

/// Reduced costs above `-OPT_TOL` count as nonnegative.
const OPT_TOL: f64 = 1e-10;
/// Ratios closer than this are ties for Bland's leaving rule.
const RATIO_TIE: f64 = 1e-12;

/// How an original variable is expressed through nonnegative columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = lo + x'`
    Shift { col: usize, lo: f64 },
    /// `x = hi - x'`
    Mirror { col: usize, hi: f64 },
    /// `x = x⁺ - x⁻`
    Split { pos: usize, neg: usize },
}

#[derive(Debug, Clone, Copy)]
enum RowOrigin {
    Eq(usize),
    Ub(usize),
    /// Upper bound of a shifted variable.
    Bound(usize),
}

/// `min cost'z` over `A z = b`, `z >= 0`, with `b >= 0` after row flips.
struct StdForm {
    m: usize,
    ncols: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    cost: Vec<f64>,
    art_start: usize,
    row_sign: Vec<f64>,
    row_origin: Vec<RowOrigin>,
    vars: Vec<VarMap>,
    init_basis: Vec<usize>,
}

impl StdForm {
    fn build(lp: &LinearProgram) -> StdForm {
        let n = lp.n_vars();
        let mut vars = Vec::with_capacity(n);
        let mut n_struct = 0;
        for &(lo, hi) in &lp.bounds {
            if lo.is_finite() {
                vars.push(VarMap::Shift { col: n_struct, lo });
                n_struct += 1;
            } else if hi.is_finite() {
                vars.push(VarMap::Mirror { col: n_struct, hi });
                n_struct += 1;
            } else {
                vars.push(VarMap::Split { pos: n_struct, neg: n_struct + 1 });
                n_struct += 2;
            }
        }

        // Rows as (coefficients on structural columns, rhs, has slack, origin).
        let mut rows: Vec<(Vec<f64>, f64, bool, RowOrigin)> = Vec::new();
        let mut push_row = |coefs: &[f64], rhs: f64, slack: bool, origin: RowOrigin| {
            let mut r = vec![0.0; n_struct];
            let mut b = rhs;
            for (j, &a) in coefs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                match vars[j] {
                    VarMap::Shift { col, lo } => {
                        r[col] += a;
                        b -= a * lo;
                    }
                    VarMap::Mirror { col, hi } => {
                        r[col] -= a;
                        b -= a * hi;
                    }
                    VarMap::Split { pos, neg } => {
                        r[pos] += a;
                        r[neg] -= a;
                    }
                }
            }
            rows.push((r, b, slack, origin));
        };
        for (i, row) in lp.a_eq.iter().enumerate() {
            push_row(row, lp.b_eq[i], false, RowOrigin::Eq(i));
        }
        for (i, row) in lp.a_ub.iter().enumerate() {
            push_row(row, lp.b_ub[i], true, RowOrigin::Ub(i));
        }
        for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
            if lo.is_finite() && hi.is_finite() {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                push_row(&e, hi, true, RowOrigin::Bound(j));
            }
        }

        let m = rows.len();
        let n_slack = rows.iter().filter(|r| r.2).count();
        let mut row_sign = vec![1.0; m];
        let mut needs_art = vec![false; m];
        for (i, r) in rows.iter().enumerate() {
            if r.1 < 0.0 {
                row_sign[i] = -1.0;
            }
            needs_art[i] = !r.2 || row_sign[i] < 0.0;
        }
        let n_art = needs_art.iter().filter(|&&x| x).count();
        let art_start = n_struct + n_slack;
        let ncols = art_start + n_art;

        let mut a = vec![0.0; m * ncols];
        let mut b = vec![0.0; m];
        let mut init_basis = vec![0; m];
        let mut slack_col = n_struct;
        let mut art_col = art_start;
        let mut row_origin = Vec::with_capacity(m);
        for (i, (coefs, rhs, slack, origin)) in rows.into_iter().enumerate() {
            let s = row_sign[i];
            for (j, v) in coefs.into_iter().enumerate() {
                a[i * ncols + j] = s * v;
            }
            b[i] = s * rhs;
            if slack {
                a[i * ncols + slack_col] = s;
                if !needs_art[i] {
                    init_basis[i] = slack_col;
                }
                slack_col += 1;
            }
            if needs_art[i] {
                a[i * ncols + art_col] = 1.0;
                init_basis[i] = art_col;
                art_col += 1;
            }
            row_origin.push(origin);
        }

        let mut cost = vec![0.0; ncols];
        for (j, v) in vars.iter().enumerate() {
            let c = lp.objective[j];
            match *v {
                VarMap::Shift { col, .. } => cost[col] = c,
                VarMap::Mirror { col, .. } => cost[col] = -c,
                VarMap::Split { pos, neg } => {
                    cost[pos] = c;
                    cost[neg] = -c;
                }
            }
        }

        StdForm { m, ncols, a, b, cost, art_start, row_sign, row_origin, vars, init_basis }
    }

    fn col(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.m).map(move |i| self.a[i * self.ncols + j])
    }

    /// Maps standard-form row multipliers onto the original program.
    fn certificate(&self, lp: &LinearProgram, y: &[f64], c: &[f64]) -> DualCertificate {
        let n = lp.n_vars();
        let mut eq = vec![0.0; lp.a_eq.len()];
        let mut ub = vec![0.0; lp.a_ub.len()];
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for (i, origin) in self.row_origin.iter().enumerate() {
            let yi = y[i] * self.row_sign[i];
            match *origin {
                RowOrigin::Eq(r) => eq[r] = yi,
                RowOrigin::Ub(r) => ub[r] = yi,
                RowOrigin::Bound(j) => upper[j] = -yi,
            }
        }
        for j in 0..n {
            let mut r = c[j] + upper[j];
            for (i, row) in lp.a_eq.iter().enumerate() {
                r -= row[j] * eq[i];
            }
            for (i, row) in lp.a_ub.iter().enumerate() {
                r -= row[j] * ub[i];
            }
            let (lo, hi) = lp.bounds[j];
            if r >= 0.0 {
                if lo.is_finite() {
                    lower[j] = r;
                }
            } else if hi.is_finite() {
                upper[j] -= r;
            }
        }
        DualCertificate { eq, ub, lower, upper }
    }
}

/// Dense tableau `B⁻¹[A | b]` with a reduced-cost row.
struct Tableau {
    m: usize,
    ncols: usize,
    t: Vec<f64>,
    rhs: Vec<f64>,
    d: Vec<f64>,
    basis: Vec<usize>,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn new(sf: &StdForm) -> Tableau {
        Tableau {
            m: sf.m,
            ncols: sf.ncols,
            t: sf.a.clone(),
            rhs: sf.b.clone(),
            d: vec![0.0; sf.ncols],
            basis: sf.init_basis.clone(),
        }
    }

    fn set_costs(&mut self, cost: &[f64]) {
        self.d.copy_from_slice(cost);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * self.ncols..(i + 1) * self.ncols];
                for (dj, tij) in self.d.iter_mut().zip(row) {
                    *dj -= cb * tij;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nc = self.ncols;
        let p = self.t[r * nc + j];
        for v in &mut self.t[r * nc..(r + 1) * nc] {
            *v /= p;
        }
        self.rhs[r] /= p;
        let pivot_row: Vec<f64> = self.t[r * nc..(r + 1) * nc].to_vec();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * nc + j];
            if f != 0.0 {
                for (v, pr) in self.t[i * nc..(i + 1) * nc].iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                self.t[i * nc + j] = 0.0;
                self.rhs[i] -= f * pivot_rhs;
                if self.rhs[i] < 0.0 && self.rhs[i] > -FEAS_TOL {
                    self.rhs[i] = 0.0;
                }
            }
        }
        let f = self.d[j];
        if f != 0.0 {
            for (v, pr) in self.d.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            self.d[j] = 0.0;
        }
        self.basis[r] = j;
    }

    /// Runs Bland's rule over columns `< enter_limit`.
    fn run(&mut self, enter_limit: usize, budget: &mut usize) -> Result<Outcome> {
        loop {
            let entering = (0..enter_limit).find(|&j| self.d[j] < -OPT_TOL);
            let Some(j) = entering else {
                return Ok(Outcome::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.t[i * self.ncols + j];
                if a > PIVOT_TOL {
                    let ratio = self.rhs[i].max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - RATIO_TIE
                                || ((ratio - br).abs() <= RATIO_TIE && self.basis[i] < self.basis[bi])
                            {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Ok(Outcome::Unbounded);
            };
            if *budget == 0 {
                return Err(Error::Solver("simplex iteration limit reached".into()));
            }
            *budget -= 1;
            self.pivot(r, j);
        }
    }
}

/// Solves `B z = rhs` (or `B' z = rhs`) for the basis columns of `sf`.
fn basis_solve(sf: &StdForm, basis: &[usize], rhs: &[f64], transpose: bool) -> Option<Vec<f64>> {
    let m = sf.m;
    if m == 0 {
        return Some(Vec::new());
    }
    let mut bm = DMatrix::<f64>::zeros(m, m);
    for (c, &j) in basis.iter().enumerate() {
        for (r, v) in sf.col(j).enumerate() {
            bm[(r, c)] = v;
        }
    }
    if transpose {
        bm.transpose_mut();
    }
    let lu = bm.lu();
    lu.solve(&DVector::from_column_slice(rhs)).map(|v| v.as_slice().to_vec())
}

/// Solves a linear program with the two-phase simplex method and Bland's rule.
///
/// Optimal solutions come with dual multipliers and infeasible ones with a
/// Farkas ray, both expressed on the original program (see
/// [`DualCertificate`]).
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.n_vars();

    // Crossed bounds are infeasible on their own.
    for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
        if lo > hi {
            let mut lower = vec![0.0; n];
            let mut upper = vec![0.0; n];
            lower[j] = 1.0;
            upper[j] = 1.0;
            return Ok(LpSolution::infeasible(Some(DualCertificate {
                eq: vec![0.0; lp.a_eq.len()],
                ub: vec![0.0; lp.a_ub.len()],
                lower,
                upper,
            })));
        }
    }

    let sf = StdForm::build(lp);
    let mut tab = Tableau::new(&sf);
    let mut budget = 20_000 + 200 * (sf.m + sf.ncols);
    let scale = sf.b.iter().fold(1.0_f64, |a, v| a.max(v.abs()));

    // Phase I.
    if sf.art_start < sf.ncols {
        let mut phase1 = vec![0.0; sf.ncols];
        for c in &mut phase1[sf.art_start..] {
            *c = 1.0;
        }
        tab.set_costs(&phase1);
        tab.run(sf.ncols, &mut budget)?;
        let infeas: f64 = (0..sf.m).filter(|&i| tab.basis[i] >= sf.art_start).map(|i| tab.rhs[i]).sum();
        if infeas > FEAS_TOL * scale {
            let cb: Vec<f64> = tab.basis.iter().map(|&j| phase1[j]).collect();
            let cert = basis_solve(&sf, &tab.basis, &cb, true).map(|y| sf.certificate(lp, &y, &vec![0.0; n]));
            return Ok(LpSolution::infeasible(cert));
        }
        // Drive artificials out of the basis where possible; rows where that
        // fails are redundant and keep their artificial at level zero.
        for r in 0..sf.m {
            if tab.basis[r] < sf.art_start {
                continue;
            }
            let row = &tab.t[r * sf.ncols..r * sf.ncols + sf.art_start];
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if v.abs() > PIVOT_TOL && best.is_none_or(|(_, bv)| v.abs() > bv) {
                    best = Some((j, v.abs()));
                }
            }
            if let Some((j, _)) = best {
                tab.pivot(r, j);
            }
        }
    }

    // Phase II; artificial columns may never re-enter.
    tab.set_costs(&sf.cost);
    match tab.run(sf.art_start, &mut budget)? {
        Outcome::Unbounded => return Ok(LpSolution::unbounded()),
        Outcome::Optimal => {}
    }

    let xb = basis_solve(&sf, &tab.basis, &sf.b, false).unwrap_or_else(|| tab.rhs.clone());
    let mut z = vec![0.0; sf.ncols];
    for (i, &j) in tab.basis.iter().enumerate() {
        z[j] = xb[i].max(0.0);
    }
    let x: Vec<f64> = sf
        .vars
        .iter()
        .map(|v| match *v {
            VarMap::Shift { col, lo } => lo + z[col],
            VarMap::Mirror { col, hi } => hi - z[col],
            VarMap::Split { pos, neg } => z[pos] - z[neg],
        })
        .collect();
    let viol = lp.max_violation(&x);
    if viol > 1e-7 * scale {
        return Err(Error::Solver(format!(
            "recovered point violates constraints by {viol:.3e}; numerically degenerate program"
        )));
    }
    let cb: Vec<f64> = tab.basis.iter().map(|&j| sf.cost[j]).collect();
    let cert = basis_solve(&sf, &tab.basis, &cb, true).map(|y| sf.certificate(lp, &y, &lp.objective));
    Ok(LpSolution { status: LpStatus::Optimal, value: dot(&lp.objective, &x), point: Some(x), certificate: cert })
}
