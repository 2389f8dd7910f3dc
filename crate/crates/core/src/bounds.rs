//! Lower bounds on the share of always-takers whose outcome reacts to the
//! treatment, the sharp-null feasibility slack, trimming bounds on direct
//! effects, and breakdown defier budgets.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linprog::{solve_lfp, solve_lp, AffineForm, LinearProgram, LpStatus};
use crate::probtab::{delta_sup, DistTable, MediatorOrder};
use crate::typeshares::{
    auto_relax, build_identified_set, minimal_defier_budget, theta_index, theta_kk_min, IdentifiedSetSpec,
    RestrictionKind, RestrictionSet,
};

/// Below this an always-taker share is treated as zero.
const SHARE_FLOOR: f64 = 1e-12;
/// Below this the pooled denominator `Σ θ_kk` is treated as vanishing.
const POOL_FLOOR: f64 = 1e-9;
/// Bisection resolution for breakdown budgets.
const BREAKDOWN_TOL: f64 = 1e-6;
/// A pooled bound above this counts as positive.
const POSITIVE: f64 = 1e-9;

/// Options shared by the bound computations.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsOptions {
    /// Replace an empty monotone identified set by the smallest defier budget
    /// that restores feasibility.
    pub auto_relax: bool,
    /// Compute trimming bounds on direct effects (needs numeric outcomes).
    pub ade: bool,
    /// Tolerated within-bin effect share for a binned mediator.
    pub nu_max: Option<f64>,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        BoundsOptions { auto_relax: false, ade: true, nu_max: None }
    }
}

/// Trimming interval for the direct effect on `k`-always-takers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdeInterval {
    pub lb: f64,
    pub ub: f64,
    /// False when `θ_kk^min = 0` and the interval is the full outcome span.
    pub informative: bool,
}

/// Result of the pooled linear-fractional program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledBound {
    pub value: f64,
    /// Share vector attaining the bound (a slack minimizer when degenerate).
    pub theta: Vec<f64>,
    /// Set when `Σ θ_kk` can vanish on the identified set; the bound is then 0.
    pub degenerate: bool,
}

/// Optimal value and minimizer of the sharp-null feasibility program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlackSolution {
    pub value: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownResult {
    /// Largest budget at which the pooled bound is still positive.
    pub dbar_star: f64,
    /// Smallest budget at which the identified set is nonempty.
    pub min_feasible_dbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub nu_lb: Vec<f64>,
    pub nu_pooled_lb: f64,
    pub pooled_degenerate: bool,
    pub slack: f64,
    pub theta: Vec<f64>,
    pub theta_kk_min: Vec<f64>,
    pub delta_sup: Vec<f64>,
    pub ade: Vec<Option<AdeInterval>>,
    pub eta: Vec<f64>,
    pub restriction: String,
    pub auto_relaxed_dbar: Option<f64>,
    pub nu_max: Option<f64>,
    /// Whether every `ν_k` can stay below `nu_max` jointly.
    pub within_bin_consistent: Option<bool>,
}

fn deltas(table: &DistTable) -> Vec<f64> {
    (0..table.k()).map(|k| delta_sup(table, k)).collect()
}

/// Builds the identified set, relaxing monotonicity when requested.
pub fn resolve_identified_set(
    table: &DistTable,
    r: &RestrictionSet,
    allow_relax: bool,
) -> Result<(IdentifiedSetSpec, Option<f64>)> {
    let spec = build_identified_set(table, r)?;
    if spec.is_feasible() {
        return Ok((spec, None));
    }
    if allow_relax && r.kind().is_monotone_like() {
        return auto_relax(&spec, table.support());
    }
    Err(spec.infeasibility_error())
}

fn nu_bounds_on(spec: &IdentifiedSetSpec, delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut nu = Vec::with_capacity(spec.k());
    let mut mins = Vec::with_capacity(spec.k());
    for k in 0..spec.k() {
        let tmin = theta_kk_min(spec, k)?;
        mins.push(tmin);
        if tmin <= SHARE_FLOOR {
            nu.push(0.0);
        } else {
            let excess = (delta[k] - (spec.p1()[k] - tmin)).max(0.0);
            nu.push((excess / tmin).clamp(0.0, 1.0));
        }
    }
    Ok((nu, mins))
}

/// Per-`k` lower bounds on `ν_k`, the share of `k`-always-takers whose
/// outcome changes with treatment.
pub fn nu_lower_bounds(table: &DistTable, r: &RestrictionSet) -> Result<Vec<f64>> {
    let (spec, _) = resolve_identified_set(table, r, false)?;
    Ok(nu_bounds_on(&spec, &deltas(table))?.0)
}

fn slack_on(spec: &IdentifiedSetSpec, delta: &[f64], nu_ub: f64) -> Result<SlackSolution> {
    let k = spec.k();
    let n = k * k;
    let mut lp = LinearProgram::new(n + 1);
    lp.set_bounds(n, f64::NEG_INFINITY, f64::INFINITY);
    let mut obj = vec![0.0; n + 1];
    obj[n] = 1.0;
    lp.objective = obj;
    spec.append_constraints(&mut lp, 0);
    for m in 0..k {
        let mut row = vec![0.0; n + 1];
        row[theta_index(k, m, m)] = 1.0 - nu_ub;
        row[n] = -1.0;
        lp.add_ub(row, spec.p1()[m] - delta[m]);
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("slack program ended with status {:?}", sol.status)));
    }
    let point = sol.point.expect("optimal point");
    Ok(SlackSolution { value: sol.value, theta: point[..n].to_vec() })
}

/// `min s` subject to `sup_A Δ_k(A) ≤ P(M=m_k|D=1) − (1 − ν_ub)·θ_kk + s` for
/// all `k` over the identified set. Nonpositive values mean the data are
/// consistent with every always-taker effect share being at most `nu_ub`;
/// `nu_ub = 0` is the sharp null.
pub fn sharp_null_slack(table: &DistTable, r: &RestrictionSet, nu_ub: f64) -> Result<SlackSolution> {
    if !(0.0..=1.0).contains(&nu_ub) {
        return Err(Error::Domain(format!("nu_ub must lie in [0, 1], got {nu_ub}")));
    }
    let (spec, _) = resolve_identified_set(table, r, false)?;
    slack_on(&spec, &deltas(table), nu_ub)
}

/// [`sharp_null_slack`] over an identified set that was already resolved
/// (for example after relaxing monotonicity).
pub fn sharp_null_slack_on(spec: &IdentifiedSetSpec, table: &DistTable, nu_ub: f64) -> Result<SlackSolution> {
    if !spec.is_feasible() {
        return Err(spec.infeasibility_error());
    }
    if spec.k() != table.k() {
        return Err(Error::Structural("identified set and table disagree on the mediator support".into()));
    }
    slack_on(spec, &deltas(table), nu_ub)
}

fn pooled_on(spec: &IdentifiedSetSpec, delta: &[f64]) -> Result<PooledBound> {
    let k = spec.k();
    let n = k * k;
    // Variables: θ (K²) followed by ν̃_k = θ_kk ν_k (K).
    let mut lp = LinearProgram::new(n + k);
    spec.append_constraints(&mut lp, 0);
    let mut den = vec![0.0; n + k];
    for m in 0..k {
        den[theta_index(k, m, m)] = 1.0;
        // ν̃_m ≥ Δ_m − Σ_{l≠m} θ_lm
        let mut row = vec![0.0; n + k];
        for l in (0..k).filter(|&l| l != m) {
            row[theta_index(k, l, m)] = -1.0;
        }
        row[n + m] = -1.0;
        lp.add_ub(row, -delta[m]);
        // ν̃_m ≤ θ_mm
        let mut cap = vec![0.0; n + k];
        cap[n + m] = 1.0;
        cap[theta_index(k, m, m)] = -1.0;
        lp.add_ub(cap, 0.0);
    }
    let den_min = solve_lp(&lp.clone().with_objective(den.clone()))?;
    if den_min.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("pooled program ended with status {:?}", den_min.status)));
    }
    if den_min.value <= POOL_FLOOR {
        let slack = slack_on(spec, delta, 0.0)?;
        return Ok(PooledBound { value: 0.0, theta: slack.theta, degenerate: true });
    }
    let mut num = vec![0.0; n + k];
    num[n..].iter_mut().for_each(|v| *v = 1.0);
    let sol = solve_lfp(&AffineForm::new(num, 0.0), &AffineForm::new(den, 0.0), &lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("pooled ratio program ended with status {:?}", sol.status)));
    }
    let point = sol.point.expect("optimal point");
    Ok(PooledBound { value: sol.value.clamp(0.0, 1.0), theta: point[..n].to_vec(), degenerate: false })
}

/// Lower bound on `ν̄ = Σ_k θ_kk ν_k / Σ_k θ_kk`, the share of all
/// always-takers whose outcome changes with treatment.
pub fn nu_pooled_lower_bound(table: &DistTable, r: &RestrictionSet) -> Result<PooledBound> {
    let (spec, _) = resolve_identified_set(table, r, false)?;
    pooled_on(&spec, &deltas(table))
}

/// `η_k = (sup_A Δ_k − Σ_{l≠k} θ_lk)₊` at the share vector `theta`.
pub fn eta_at(table: &DistTable, theta: &[f64]) -> Vec<f64> {
    let k = table.k();
    (0..k)
        .map(|m| {
            let inflow: f64 = (0..k).filter(|&l| l != m).map(|l| theta[theta_index(k, l, m)]).sum();
            (delta_sup(table, m) - inflow).max(0.0)
        })
        .collect()
}

/// Mean of the lowest `share` fraction of a discrete distribution over sorted
/// `levels`, integrating the quantile function exactly.
fn trimmed_mean_low(levels: &[f64], probs: &[f64], share: f64) -> f64 {
    let mut left = share;
    let mut acc = 0.0;
    for (&y, &p) in levels.iter().zip(probs) {
        if left <= 0.0 {
            break;
        }
        let take = p.min(left);
        acc += take * y;
        left -= take;
    }
    acc / share
}

fn trimmed_mean_high(levels: &[f64], probs: &[f64], share: f64) -> f64 {
    let mut left = share;
    let mut acc = 0.0;
    for (&y, &p) in levels.iter().zip(probs).rev() {
        if left <= 0.0 {
            break;
        }
        let take = p.min(left);
        acc += take * y;
        left -= take;
    }
    acc / share
}

/// Bounds on the mean of a subpopulation making up fraction `share` of the
/// distribution `probs` over sorted `levels`: the means of its lowest and
/// highest `share` fractions.
pub fn trimming_bounds(levels: &[f64], probs: &[f64], share: f64) -> Result<(f64, f64)> {
    if !(share > 0.0 && share <= 1.0 + 1e-12) {
        return Err(Error::Domain(format!("trimming share must lie in (0, 1], got {share}")));
    }
    if levels.len() != probs.len() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Structural("levels must be strictly increasing and match the probabilities".into()));
    }
    let share = share.min(1.0);
    Ok((trimmed_mean_low(levels, probs, share), trimmed_mean_high(levels, probs, share)))
}

fn ade_on(table: &DistTable, spec: &IdentifiedSetSpec, k: usize, tmin: f64) -> Result<AdeInterval> {
    let levels = table
        .numeric_levels()
        .ok_or_else(|| Error::Precondition("direct-effect bounds need numeric outcome levels".into()))?;
    let lo = levels.first().copied().unwrap_or(0.0);
    let hi = levels.last().copied().unwrap_or(0.0);
    if tmin <= SHARE_FLOOR {
        return Ok(AdeInterval { lb: lo - hi, ub: hi - lo, informative: false });
    }
    let mut lbs = [0.0; 2];
    let mut ubs = [0.0; 2];
    for d in 0..2 {
        let pd = if d == 0 { spec.p0()[k] } else { spec.p1()[k] };
        let cond: Vec<f64> = table.partial(d, k).iter().map(|v| v / pd).collect();
        let share = (tmin / pd).min(1.0);
        let (l, u) = trimming_bounds(&levels, &cond, share)?;
        lbs[d] = l;
        ubs[d] = u;
    }
    Ok(AdeInterval { lb: lbs[1] - ubs[0], ub: ubs[1] - lbs[0], informative: true })
}

/// Trimming bounds on the average direct effect for `k`-always-takers.
pub fn ade_bounds(table: &DistTable, r: &RestrictionSet, k: usize) -> Result<AdeInterval> {
    if k >= table.k() {
        return Err(Error::Structural(format!("mediator index {k} outside a {}-point support", table.k())));
    }
    let (spec, _) = resolve_identified_set(table, r, false)?;
    let tmin = theta_kk_min(&spec, k)?;
    ade_on(table, &spec, k, tmin)
}

/// Largest defier budget `d̄` for which the pooled bound under
/// `DefierBudget(d̄)` stays positive, located by bisection.
pub fn breakdown_defier_budget(table: &DistTable) -> Result<BreakdownResult> {
    if table.support().order() != MediatorOrder::Total {
        return Err(Error::Precondition("breakdown budgets need a scalar ordered mediator".into()));
    }
    let d_min = minimal_defier_budget(table, false)?;
    let delta = deltas(table);
    let bound = |dbar: f64| -> Result<f64> {
        let r = RestrictionSet::realize(RestrictionKind::DefierBudget { dbar }, table.support())?;
        let spec = build_identified_set(table, &r)?;
        if !spec.is_feasible() {
            return Err(spec.infeasibility_error());
        }
        Ok(pooled_on(&spec, &delta)?.value)
    };
    let result = |dbar_star| BreakdownResult { dbar_star, min_feasible_dbar: d_min };
    if bound(d_min)? <= POSITIVE {
        return Ok(result(d_min));
    }
    if bound(1.0)? > POSITIVE {
        return Ok(result(1.0));
    }
    let (mut lo, mut hi) = (d_min, 1.0);
    while hi - lo > BREAKDOWN_TOL {
        let mid = 0.5 * (lo + hi);
        if bound(mid)? > POSITIVE {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(result(lo))
}

/// Every bound for one table and restriction.
pub fn compute_bounds(table: &DistTable, r: &RestrictionSet, opts: &BoundsOptions) -> Result<BoundsReport> {
    let (spec, relaxed) = resolve_identified_set(table, r, opts.auto_relax)?;
    let delta = deltas(table);
    let (nu_lb, mins) = nu_bounds_on(&spec, &delta)?;
    let slack = slack_on(&spec, &delta, 0.0)?;
    let pooled = pooled_on(&spec, &delta)?;
    let theta = if pooled.degenerate { slack.theta.clone() } else { pooled.theta.clone() };
    let eta = eta_at(table, &theta);
    let ade = if opts.ade && table.numeric_levels().is_some() {
        (0..table.k()).map(|k| ade_on(table, &spec, k, mins[k]).map(Some)).collect::<Result<Vec<_>>>()?
    } else {
        vec![None; table.k()]
    };
    let within_bin_consistent = match opts.nu_max {
        Some(nu_max) => {
            if !(0.0..=1.0).contains(&nu_max) {
                return Err(Error::Domain(format!("nu_max must lie in [0, 1], got {nu_max}")));
            }
            Some(slack_on(&spec, &delta, nu_max)?.value <= POSITIVE)
        }
        None => None,
    };
    Ok(BoundsReport {
        nu_lb,
        nu_pooled_lb: pooled.value,
        pooled_degenerate: pooled.degenerate,
        slack: slack.value,
        theta,
        theta_kk_min: mins,
        delta_sup: delta,
        ade,
        eta,
        restriction: spec.restriction().label(),
        auto_relaxed_dbar: relaxed,
        nu_max: opts.nu_max,
        within_bin_consistent,
    })
}
