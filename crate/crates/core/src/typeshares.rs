//! Restrictions on mediator type shares and the identified set they induce.
//!
//! A unit of type `lk` has `M(0) = m_l` and `M(1) = m_k`; its population share
//! is `θ_lk`, stored at index `l·K + k`. The identified set is the set of
//! share vectors whose row sums reproduce `P(M | D = 0)`, whose column sums
//! reproduce `P(M | D = 1)`, and which satisfy the restriction `Bθ ≤ c`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linprog::{solve_lp, LinearProgram, LpStatus, FEAS_TOL};
use crate::probtab::{DistTable, MediatorOrder, MediatorSupport};

/// Index of `θ_lk` in the flattened share vector.
#[inline]
pub fn theta_index(k_total: usize, l: usize, k: usize) -> usize {
    l * k_total + k
}

/// The family a restriction set belongs to, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RestrictionKind {
    /// No defiers: `θ_lk = 0` whenever `m_l > m_k`.
    Monotone,
    /// At most `dbar` mass on defier types.
    DefierBudget {
        dbar: f64,
    },
    /// `θ_lk = 0` unless `m_l ⪯ m_k` coordinatewise.
    ElementwiseMonotone,
    /// At most `dbar` mass on types with `m_l ⋠ m_k`.
    ElementwiseDefierBudget {
        dbar: f64,
    },
    /// At most `dbar` mass on types with `‖m_l − m_k‖₂ > kappa`.
    BoundedEffect {
        kappa: f64,
        dbar: f64,
    },
    Unrestricted,
    /// Arbitrary rows `Bθ ≤ c` over the `K²` shares.
    CustomPolyhedron {
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    /// `θ_lk = 0` unless `precedes[l][k]`, for a user-declared partial order.
    PartialOrder {
        precedes: Vec<Vec<bool>>,
    },
}

impl RestrictionKind {
    /// Parses `monotone`, `defier_budget:<d>`, `elementwise`,
    /// `elementwise_budget:<d>`, `bounded:<kappa>,<d>` or `none`.
    ///
    /// Custom polyhedra are read from files by the caller.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (head, arg) = match spec.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (spec, None),
        };
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Structural(format!("bad number `{s}` in restriction `{spec}`")))
        };
        let need = || arg.ok_or_else(|| Error::Structural(format!("restriction `{spec}` needs a parameter")));
        match head {
            "monotone" => Ok(RestrictionKind::Monotone),
            "elementwise" => Ok(RestrictionKind::ElementwiseMonotone),
            "none" | "unrestricted" => Ok(RestrictionKind::Unrestricted),
            "defier_budget" => Ok(RestrictionKind::DefierBudget { dbar: num(need()?)? }),
            "elementwise_budget" => Ok(RestrictionKind::ElementwiseDefierBudget { dbar: num(need()?)? }),
            "bounded" => {
                let a = need()?;
                let (kappa, dbar) = a
                    .split_once(',')
                    .ok_or_else(|| Error::Structural(format!("`{spec}` should read bounded:<kappa>,<dbar>")))?;
                Ok(RestrictionKind::BoundedEffect { kappa: num(kappa)?, dbar: num(dbar)? })
            }
            _ => Err(Error::Structural(format!("unknown restriction `{spec}`"))),
        }
    }

    /// Compact label used in reports.
    pub fn label(&self) -> String {
        match self {
            RestrictionKind::Monotone => "monotone".into(),
            RestrictionKind::DefierBudget { dbar } => format!("defier_budget:{dbar}"),
            RestrictionKind::ElementwiseMonotone => "elementwise".into(),
            RestrictionKind::ElementwiseDefierBudget { dbar } => format!("elementwise_budget:{dbar}"),
            RestrictionKind::BoundedEffect { kappa, dbar } => format!("bounded:{kappa},{dbar} (euclidean norm)"),
            RestrictionKind::Unrestricted => "none".into(),
            RestrictionKind::CustomPolyhedron { b, .. } => format!("custom:{} rows", b.len()),
            RestrictionKind::PartialOrder { .. } => "partial_order".into(),
        }
    }

    /// Whether the restriction forbids every "defier" cell outright.
    pub fn is_monotone_like(&self) -> bool {
        matches!(self, RestrictionKind::Monotone | RestrictionKind::ElementwiseMonotone)
    }
}

/// A realized restriction `Bθ ≤ c` over the `K²` type shares.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestrictionSet {
    kind: RestrictionKind,
    k: usize,
    b: Vec<Vec<f64>>,
    c: Vec<f64>,
}

/// Types `(l, k)` that move against the order: `m_l > m_k` for a total order,
/// `m_l ⋠ m_k` coordinatewise otherwise.
pub fn defier_cells(support: &MediatorSupport, elementwise: bool) -> Result<Vec<(usize, usize)>> {
    let k = support.len();
    if !elementwise && support.order() != MediatorOrder::Total {
        return Err(Error::Structural(
            "monotonicity needs a totally ordered scalar mediator; use the elementwise order".into(),
        ));
    }
    let mut out = Vec::new();
    for l in 0..k {
        for kk in 0..k {
            let defier =
                if elementwise { !support.precedes(l, kk) } else { support.points()[l][0] > support.points()[kk][0] };
            if defier {
                out.push((l, kk));
            }
        }
    }
    Ok(out)
}

impl RestrictionSet {
    /// Realizes `kind` on the given support.
    pub fn realize(kind: RestrictionKind, support: &MediatorSupport) -> Result<Self> {
        let k = support.len();
        let n = k * k;
        let unit = |cells: &[(usize, usize)]| -> Vec<Vec<f64>> {
            cells
                .iter()
                .map(|&(l, kk)| {
                    let mut r = vec![0.0; n];
                    r[theta_index(k, l, kk)] = 1.0;
                    r
                })
                .collect()
        };
        let budget = |cells: &[(usize, usize)], dbar: f64| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            if !(dbar >= 0.0) {
                return Err(Error::Domain(format!("defier budget must be nonnegative, got {dbar}")));
            }
            let mut r = vec![0.0; n];
            for &(l, kk) in cells {
                r[theta_index(k, l, kk)] = 1.0;
            }
            Ok((vec![r], vec![dbar]))
        };
        let (b, c) = match &kind {
            RestrictionKind::Monotone => {
                let cells = defier_cells(support, false)?;
                let c = vec![0.0; cells.len()];
                (unit(&cells), c)
            }
            RestrictionKind::ElementwiseMonotone => {
                let cells = defier_cells(support, true)?;
                let c = vec![0.0; cells.len()];
                (unit(&cells), c)
            }
            RestrictionKind::DefierBudget { dbar } => budget(&defier_cells(support, false)?, *dbar)?,
            RestrictionKind::ElementwiseDefierBudget { dbar } => budget(&defier_cells(support, true)?, *dbar)?,
            RestrictionKind::BoundedEffect { kappa, dbar } => {
                if !(*kappa >= 0.0) {
                    return Err(Error::Domain(format!("kappa must be nonnegative, got {kappa}")));
                }
                let mut cells = Vec::new();
                for l in 0..k {
                    for kk in 0..k {
                        if support.distance(l, kk) > *kappa {
                            cells.push((l, kk));
                        }
                    }
                }
                budget(&cells, *dbar)?
            }
            RestrictionKind::Unrestricted => (Vec::new(), Vec::new()),
            RestrictionKind::CustomPolyhedron { b, c } => {
                if b.len() != c.len() || b.iter().any(|r| r.len() != n) {
                    return Err(Error::Structural(format!(
                        "custom restriction must have {n} columns and matching rhs"
                    )));
                }
                (b.clone(), c.clone())
            }
            RestrictionKind::PartialOrder { precedes } => {
                if precedes.len() != k || precedes.iter().any(|r| r.len() != k) {
                    return Err(Error::Structural(format!("partial order table must be {k}×{k}")));
                }
                let cells: Vec<(usize, usize)> =
                    (0..k).flat_map(|l| (0..k).map(move |kk| (l, kk))).filter(|&(l, kk)| !precedes[l][kk]).collect();
                let c = vec![0.0; cells.len()];
                (unit(&cells), c)
            }
        };
        let rs = RestrictionSet { kind, k, b, c };
        if !rs.intersects_simplex()? {
            return Err(Error::Domain(format!("restriction {} does not meet the simplex", rs.kind.label())));
        }
        Ok(rs)
    }

    pub fn kind(&self) -> &RestrictionKind {
        &self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.b
    }

    pub fn rhs(&self) -> &[f64] {
        &self.c
    }

    pub fn label(&self) -> String {
        self.kind.label()
    }

    /// LP check that `{θ ≥ 0, Σθ = 1, Bθ ≤ c}` is nonempty.
    fn intersects_simplex(&self) -> Result<bool> {
        let n = self.k * self.k;
        let mut lp = LinearProgram::new(n);
        lp.add_eq(vec![1.0; n], 1.0);
        for (r, &c) in self.b.iter().zip(&self.c) {
            lp.add_ub(r.clone(), c);
        }
        Ok(solve_lp(&lp)?.status == LpStatus::Optimal)
    }
}

/// The identified set for given arm-wise mediator marginals and restriction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifiedSetSpec {
    k: usize,
    p0: Vec<f64>,
    p1: Vec<f64>,
    restriction: RestrictionSet,
    feasible: bool,
}

/// Builds the identified set from the table's mediator marginals.
pub fn build_identified_set(table: &DistTable, r: &RestrictionSet) -> Result<IdentifiedSetSpec> {
    IdentifiedSetSpec::from_marginals(table.marginals(0), table.marginals(1), r.clone())
}

impl IdentifiedSetSpec {
    pub fn from_marginals(p0: Vec<f64>, p1: Vec<f64>, restriction: RestrictionSet) -> Result<Self> {
        let k = p0.len();
        if p1.len() != k || restriction.k() != k {
            return Err(Error::Structural(format!(
                "marginals of length {} and {} with a restriction over {} mediator values",
                p0.len(),
                p1.len(),
                restriction.k()
            )));
        }
        let mut spec = IdentifiedSetSpec { k, p0, p1, restriction, feasible: false };
        spec.feasible = solve_lp(&spec.lp(vec![0.0; k * k]))?.status == LpStatus::Optimal;
        Ok(spec)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    pub fn restriction(&self) -> &RestrictionSet {
        &self.restriction
    }

    pub fn is_feasible(&self) -> bool {
        self.feasible
    }

    /// The marginal equalities as `(row, rhs)` pairs: first the `D = 0` rows,
    /// then the `D = 1` columns.
    pub fn marginal_rows(&self) -> Vec<(Vec<f64>, f64)> {
        let k = self.k;
        let mut out = Vec::with_capacity(2 * k);
        for m in 0..k {
            let mut r = vec![0.0; k * k];
            for l in 0..k {
                r[theta_index(k, m, l)] = 1.0;
            }
            out.push((r, self.p0[m]));
        }
        for m in 0..k {
            let mut r = vec![0.0; k * k];
            for l in 0..k {
                r[theta_index(k, l, m)] = 1.0;
            }
            out.push((r, self.p1[m]));
        }
        out
    }

    /// Linear program over `θ ≥ 0` with the identified-set constraints.
    pub fn lp(&self, objective: Vec<f64>) -> LinearProgram {
        let mut lp = LinearProgram::new(self.k * self.k).with_objective(objective);
        self.append_constraints(&mut lp, 0);
        lp
    }

    /// Adds the identified-set rows to `lp`, whose variables `offset..offset+K²`
    /// hold `θ`.
    pub fn append_constraints(&self, lp: &mut LinearProgram, offset: usize) {
        let n = lp.n_vars();
        let place = |row: &[f64]| {
            let mut r = vec![0.0; n];
            r[offset..offset + row.len()].copy_from_slice(row);
            r
        };
        for (row, rhs) in self.marginal_rows() {
            lp.add_eq(place(&row), rhs);
        }
        for (row, &c) in self.restriction.rows().iter().zip(self.restriction.rhs()) {
            lp.add_ub(place(row), c);
        }
    }

    /// Largest violation of the identified-set constraints at `theta`.
    pub fn violation(&self, theta: &[f64]) -> f64 {
        self.lp(vec![0.0; self.k * self.k]).max_violation(theta)
    }

    /// Error describing an empty identified set, with the smallest defier
    /// budget that would restore feasibility when one applies.
    pub fn infeasibility_error(&self) -> Error {
        let suggestion = minimal_defier_budget_for(self).ok().flatten();
        let mut message = format!("identified set is empty under restriction {}", self.restriction.label());
        if let Some(d) = suggestion {
            message.push_str(&format!("; the smallest defier budget consistent with the data is {d:.6}"));
        }
        Error::Identification { message, suggested_dbar: suggestion }
    }

    fn require_feasible(&self) -> Result<()> {
        if self.feasible {
            Ok(())
        } else {
            Err(self.infeasibility_error())
        }
    }
}

fn minimal_defier_budget_for(spec: &IdentifiedSetSpec) -> Result<Option<f64>> {
    match spec.restriction.kind() {
        RestrictionKind::Monotone
        | RestrictionKind::DefierBudget { .. }
        | RestrictionKind::ElementwiseMonotone
        | RestrictionKind::ElementwiseDefierBudget { .. } => {
            minimal_defier_mass(&spec.p0, &spec.p1, &spec.restriction_defier_cells()).map(Some)
        }
        _ => Ok(None),
    }
}

impl IdentifiedSetSpec {
    /// Defier cells implied by the realized restriction: the cells pinned to
    /// zero by a monotone restriction, or the cells of a budget row.
    fn restriction_defier_cells(&self) -> Vec<(usize, usize)> {
        let k = self.k;
        let mut cells = Vec::new();
        for row in self.restriction.rows() {
            for (idx, &v) in row.iter().enumerate() {
                if v != 0.0 && !cells.contains(&(idx / k, idx % k)) {
                    cells.push((idx / k, idx % k));
                }
            }
        }
        cells
    }
}

/// Smallest total mass on `cells` among share vectors matching the marginals.
pub fn minimal_defier_mass(p0: &[f64], p1: &[f64], cells: &[(usize, usize)]) -> Result<f64> {
    let k = p0.len();
    let mut obj = vec![0.0; k * k];
    for &(l, kk) in cells {
        obj[theta_index(k, l, kk)] = 1.0;
    }
    let unrestricted = RestrictionSet { kind: RestrictionKind::Unrestricted, k, b: vec![], c: vec![] };
    let spec = IdentifiedSetSpec { k, p0: p0.to_vec(), p1: p1.to_vec(), restriction: unrestricted, feasible: true };
    let sol = solve_lp(&spec.lp(obj))?;
    match sol.status {
        LpStatus::Optimal => Ok(sol.value.max(0.0)),
        _ => Err(Error::Identification {
            message: "mediator marginals are not probability vectors of equal mass".into(),
            suggested_dbar: None,
        }),
    }
}

/// Smallest defier budget making the identified set nonempty, for a scalar
/// ordered mediator (`elementwise = false`) or the coordinatewise order.
pub fn minimal_defier_budget(table: &DistTable, elementwise: bool) -> Result<f64> {
    let cells = defier_cells(table.support(), elementwise)?;
    minimal_defier_mass(&table.marginals(0), &table.marginals(1), &cells)
}

/// If `spec` is empty under a monotone restriction, replaces it with the
/// smallest defier budget that restores feasibility and returns that budget.
pub fn auto_relax(spec: &IdentifiedSetSpec, support: &MediatorSupport) -> Result<(IdentifiedSetSpec, Option<f64>)> {
    if spec.is_feasible() {
        return Ok((spec.clone(), None));
    }
    let elementwise = match spec.restriction().kind() {
        RestrictionKind::Monotone => false,
        RestrictionKind::ElementwiseMonotone => true,
        _ => return Err(spec.infeasibility_error()),
    };
    let cells = defier_cells(support, elementwise)?;
    let dbar = minimal_defier_mass(spec.p0(), spec.p1(), &cells)?;
    let kind = if elementwise {
        RestrictionKind::ElementwiseDefierBudget { dbar }
    } else {
        RestrictionKind::DefierBudget { dbar }
    };
    let relaxed = IdentifiedSetSpec::from_marginals(
        spec.p0().to_vec(),
        spec.p1().to_vec(),
        RestrictionSet::realize(kind, support)?,
    )?;
    if !relaxed.is_feasible() {
        return Err(Error::Solver("relaxed identified set is still empty".into()));
    }
    Ok((relaxed, Some(dbar)))
}

/// `θ_kk^min = min_{θ ∈ Θ_I} θ_kk`.
pub fn theta_kk_min(spec: &IdentifiedSetSpec, k: usize) -> Result<f64> {
    spec.require_feasible()?;
    let n = spec.k * spec.k;
    let mut obj = vec![0.0; n];
    obj[theta_index(spec.k, k, k)] = 1.0;
    let sol = solve_lp(&spec.lp(obj))?;
    match sol.status {
        LpStatus::Optimal => Ok(sol.value.max(0.0)),
        _ => Err(spec.infeasibility_error()),
    }
}

/// `max_{θ ∈ Θ_I} Σ_{(l,k) ∈ cells} θ_lk`.
pub fn max_type_share(spec: &IdentifiedSetSpec, cells: &[(usize, usize)]) -> Result<f64> {
    spec.require_feasible()?;
    let mut obj = vec![0.0; spec.k * spec.k];
    for &(l, k) in cells {
        if l >= spec.k || k >= spec.k {
            return Err(Error::Structural(format!("type ({l},{k}) outside a {}-point support", spec.k)));
        }
        obj[theta_index(spec.k, l, k)] = -1.0;
    }
    let sol = solve_lp(&spec.lp(obj))?;
    match sol.status {
        LpStatus::Optimal => Ok(-sol.value),
        _ => Err(spec.infeasibility_error()),
    }
}

/// `max{P(M=m_k|D=1) − (P(M≥m_k|D=1) − P(M≥m_k|D=0)), 0}` for an ordered
/// mediator under monotonicity.
pub fn theta_kk_min_closed_form(p0: &[f64], p1: &[f64], k: usize) -> f64 {
    let s0: f64 = p0[k..].iter().sum();
    let s1: f64 = p1[k..].iter().sum();
    (p1[k] - (s1 - s0)).max(0.0)
}

/// Share vector attaining `θ_kk^min` at every `k` simultaneously, built by a
/// cascade that routes compliers into each mediator value from the lowest
/// origin values first.
pub fn joint_theta_min_exists(spec: &IdentifiedSetSpec) -> Result<Vec<f64>> {
    if *spec.restriction().kind() != RestrictionKind::Monotone {
        return Err(Error::Unsupported(
            "the joint minimizer is constructed only for an ordered mediator under monotonicity".into(),
        ));
    }
    spec.require_feasible()?;
    let k = spec.k;
    let (p0, p1) = (&spec.p0, &spec.p1);
    let mut theta = vec![0.0; k * k];
    let mut row_used = vec![0.0; k];
    for kk in 0..k {
        let s0: f64 = p0[kk..].iter().sum();
        let s1: f64 = p1[kk..].iter().sum();
        // Complier inflow into kk: as much as the survival gap allows, capped
        // by the mass that arrives at kk under treatment.
        let target = p1[kk].min((s1 - s0).max(0.0));
        let mut inflow = 0.0;
        for l in 0..kk {
            let room = (p0[l] - row_used[l]).max(0.0);
            let v = (target - inflow).max(0.0).min(room);
            theta[theta_index(k, l, kk)] = v;
            row_used[l] += v;
            inflow += v;
        }
        let diag = (p1[kk] - inflow).max(0.0);
        theta[theta_index(k, kk, kk)] = diag;
        row_used[kk] += diag;
    }
    let viol = spec.violation(&theta);
    if viol > FEAS_TOL {
        return Err(Error::Solver(format!("cascade allocation violates the identified set by {viol:.3e}")));
    }
    for kk in 0..k {
        let cf = theta_kk_min_closed_form(p0, p1, kk);
        if (theta[theta_index(k, kk, kk)] - cf).abs() > FEAS_TOL {
            return Err(Error::Solver(format!("cascade diagonal at {kk} misses the closed form")));
        }
    }
    Ok(theta)
}

#[cfg(test)]
mod tests;
