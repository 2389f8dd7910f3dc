//! Finite-sample tests of the sharp null (or of `ν_k ≤ ν_k^ub`) written as a
//! linear moment-inequality system with nuisance parameters:
//! `H₀ : ∃ω, C₁ω − C₂p ≥ 0`.
//!
//! `p` stacks the cells `P(Y = y_q, M = m_k | D = d)` at index
//! `d·KQ + k·Q + q`; the mediator marginals are sums of these cells.
//! `ω = (θ̃, δ)` with `θ̃` at [`theta_index`] and `δ_kq` at `K² + k·Q + q`.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::Normal;

use crate::error::{Error, Result};
use crate::ident::{Strategy, MAX_CLIPPED_MASS};
use crate::probtab::{
    bins_from_cutpoints, quantile_cutpoints, register_support, DistTable, MediatorOrder, MediatorSupport, OutcomeLevel,
    Record, RecordSet,
};
use crate::typeshares::{auto_relax, build_identified_set, theta_index, RestrictionKind, RestrictionSet};

mod chisq;
mod lfboot;

pub use chisq::test_conditional_chisq;
pub use lfboot::{lf_statistic, test_least_favorable_bootstrap};

/// Default number of bootstrap draws.
pub const DEFAULT_DRAWS: usize = 999;
/// Smallest accepted number of bootstrap draws.
pub const MIN_DRAWS: usize = 200;
/// Expected independent observations per cell below which a warning is issued.
pub const DEFAULT_CELL_FLOOR: f64 = 15.0;
/// Moments whose standard deviation falls below this are treated as exact.
pub const HARD_SD: f64 = 1e-12;

/// How the outcome is discretized before testing.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinSpec {
    /// One level per distinct observed value.
    Raw,
    /// Pooled empirical quantile bins.
    Quantiles {
        bins: usize,
    },
    Cutpoints {
        cutpoints: Vec<f64>,
    },
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::Quantiles { bins: 5 }
    }
}

impl BinSpec {
    /// `raw`, a bin count such as `5`, or `cut:0.5,1.5`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("raw") {
            return Ok(BinSpec::Raw);
        }
        if let Some(rest) = s.strip_prefix("cut:") {
            let cutpoints = rest
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Structural(format!("bad cutpoint `{c}`"))))
                .collect::<Result<Vec<_>>>()?;
            return Ok(BinSpec::Cutpoints { cutpoints });
        }
        let bins = s
            .parse::<usize>()
            .map_err(|_| Error::Structural(format!("bins must be `raw`, a count, or `cut:a,b,…`; got `{s}`")))?;
        Ok(BinSpec::Quantiles { bins })
    }

    /// Outcome levels implied for `records`.
    pub fn levels(&self, records: &RecordSet) -> Result<Vec<OutcomeLevel>> {
        let mut ys = records.outcomes();
        ys.sort_by(|a, b| a.total_cmp(b));
        let max = *ys.last().ok_or_else(|| Error::Estimation("no records".into()))?;
        match self {
            BinSpec::Raw => {
                ys.dedup();
                Ok(ys.into_iter().map(OutcomeLevel::Point).collect())
            }
            BinSpec::Quantiles { bins } => {
                // A top cutpoint at the sample maximum would only add an empty bin.
                let cuts: Vec<f64> = quantile_cutpoints(&ys, *bins)?.into_iter().filter(|&c| c < max).collect();
                if cuts.is_empty() {
                    return BinSpec::Raw.levels(records);
                }
                bins_from_cutpoints(&cuts)
            }
            BinSpec::Cutpoints { cutpoints } => bins_from_cutpoints(cutpoints),
        }
    }
}

/// What a row of the system encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// `P(M = m_k | D = 1) − (1 − ν_k^ub)θ̃_kk − Σ_q δ_kq ≥ 0`.
    Budget,
    /// `δ_kq − [P(y_q, m_k | 1) − P(y_q, m_k | 0)] ≥ 0`.
    Excess,
    /// `δ_kq ≥ 0`.
    ExcessSign,
    /// One side of a row or column sum of `θ̃` matching a mediator marginal.
    Marginal,
    /// A row of the restriction `Bθ̃ ≤ c`.
    Restriction,
    /// `P(y, M = 0 | 0) ≥ P(y, M = 0 | 1)` for a binary mediator.
    NeverTaker,
    /// `P(y, M = 1 | 1) ≥ P(y, M = 1 | 0)` for a binary mediator.
    AlwaysTaker,
}

impl RowKind {
    /// Rows whose sampling error is studentized. The others do not involve
    /// `p` beyond a constant and are imposed exactly.
    pub fn is_moment(self) -> bool {
        !matches!(self, RowKind::ExcessSign | RowKind::Restriction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RowInfo {
    pub kind: RowKind,
    pub k: Option<usize>,
    pub q: Option<usize>,
}

/// Source of bootstrap replicates of `p̂`.
#[derive(Debug, Clone)]
enum Resampler {
    /// Per arm, each independent unit as the list of cell indices of its rows.
    Cells { arms: [Vec<Vec<usize>>; 2] },
    /// Re-estimation on resampled records for strategies other than
    /// randomization. Units are grouped by stratum (`0`/`1`).
    Records {
        records: RecordSet,
        strategy: Strategy,
        support: MediatorSupport,
        levels: Vec<OutcomeLevel>,
        strata: [Vec<Vec<usize>>; 2],
    },
    /// `p̂ + F z` with `FF' = Cov(p̂)` and `z` standard normal.
    Gaussian { factor: DMatrix<f64> },
}

/// Draws per replicate before giving up on a re-estimation that keeps failing.
const MAX_REDRAWS: u64 = 16;

impl Resampler {
    fn draw(&self, p_hat: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            Resampler::Cells { arms } => {
                let half = p_hat.len() / 2;
                let mut out = vec![0.0; p_hat.len()];
                for (d, units) in arms.iter().enumerate() {
                    let mut total = 0usize;
                    for _ in 0..units.len() {
                        let u = &units[rng.gen_range(0..units.len())];
                        for &c in u {
                            out[c] += 1.0;
                        }
                        total += u.len();
                    }
                    out[d * half..(d + 1) * half].iter_mut().for_each(|v| *v /= total as f64);
                }
                Ok(out)
            }
            Resampler::Records { records, strategy, support, levels, strata } => {
                let mut last = None;
                for _ in 0..MAX_REDRAWS {
                    let mut rows: Vec<Record> = Vec::with_capacity(records.len());
                    for units in strata {
                        for _ in 0..units.len() {
                            let u = &units[rng.gen_range(0..units.len())];
                            rows.extend(u.iter().map(|&i| records.rows()[i].clone()));
                        }
                    }
                    let attempt = RecordSet::new(rows)
                        .and_then(|rs| strategy.estimate_in(&rs, support, levels, None))
                        .map(|t| flatten(&t));
                    match attempt {
                        Ok(p) => return Ok(p),
                        Err(e) => last = Some(e),
                    }
                }
                Err(last.expect("at least one attempt"))
            }
            Resampler::Gaussian { factor } => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let z: Vec<f64> = (0..factor.ncols()).map(|_| rng.sample(normal)).collect();
                let shift = factor * nalgebra::DVector::from_vec(z);
                Ok(p_hat.iter().zip(shift.iter()).map(|(p, s)| p + s).collect())
            }
        }
    }
}

/// `H₀ : ∃ω, C₁ω − C₂p ≥ 0` together with the estimate of `p` and its
/// sampling covariance.
#[derive(Debug, Clone, Serialize)]
pub struct MomentSystem {
    pub c1: Vec<Vec<f64>>,
    pub c2: Vec<Vec<f64>>,
    pub p_hat: Vec<f64>,
    /// `Cov(p̂)`; `sigma_hat = n_eff · cov`.
    pub cov: Vec<Vec<f64>>,
    /// Independent units (clusters when clustered).
    pub n_eff: usize,
    pub rows: Vec<RowInfo>,
    pub k: usize,
    pub q: usize,
    pub nu_ub: Vec<f64>,
    pub restriction: String,
    /// Defier budget substituted when the requested restriction was empty at `p̂`.
    pub relaxed_dbar: Option<f64>,
    pub nuisance_free: bool,
    pub strategy: String,
    pub clustered: bool,
    pub warnings: Vec<String>,
    #[serde(skip)]
    resampler: Resampler,
}

impl MomentSystem {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Length of `ω`.
    pub fn n_nuisance(&self) -> usize {
        if self.nuisance_free {
            0
        } else {
            self.k * self.k + self.k * self.q
        }
    }

    /// Covariance of `√N_eff (p̂ − p)`.
    pub fn sigma_hat(&self) -> Vec<Vec<f64>> {
        let n = self.n_eff as f64;
        self.cov.iter().map(|r| r.iter().map(|v| v * n).collect()).collect()
    }

    /// `C₂p` for an arbitrary `p`.
    pub fn c2_times(&self, p: &[f64]) -> Vec<f64> {
        self.c2.iter().map(|r| crate::linprog::dot(r, p)).collect()
    }

    /// Standard deviation of `(C₂p̂)_j` for every row.
    pub fn row_sd(&self) -> Vec<f64> {
        self.c2
            .iter()
            .map(|c| {
                let mut v = 0.0;
                for (i, ci) in c.iter().enumerate() {
                    if *ci == 0.0 {
                        continue;
                    }
                    for (j, cj) in c.iter().enumerate() {
                        v += ci * self.cov[i][j] * cj;
                    }
                }
                v.max(0.0).sqrt()
            })
            .collect()
    }

    /// Rows studentized in the max statistic: moment rows with nonzero
    /// variance. Every other row is imposed exactly.
    pub fn soft_rows(&self) -> Vec<bool> {
        let sd = self.row_sd();
        self.rows.iter().zip(&sd).map(|(r, &s)| r.kind.is_moment() && s >= HARD_SD).collect()
    }

    fn redraw(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.resampler.draw(&self.p_hat, rng)
    }
}

/// Settings for [`build_moment_system`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentOptions {
    pub bins: BinSpec,
    /// Per-`k` upper bounds on `ν_k`; `None` means the sharp null.
    pub nu_ub: Option<Vec<f64>>,
    pub strategy: Strategy,
    /// Replace an empty monotone identified set by the smallest defier budget
    /// that makes it nonempty.
    pub allow_relax: bool,
    pub cell_floor: f64,
    /// Bootstrap draws used to estimate `Cov(p̂)` for non-randomized strategies.
    pub cov_draws: usize,
    pub seed: u64,
    /// Use the general system even where a nuisance-free one applies.
    pub force_general: bool,
}

impl Default for MomentOptions {
    fn default() -> Self {
        MomentOptions {
            bins: BinSpec::default(),
            nu_ub: None,
            strategy: Strategy::Randomized,
            allow_relax: false,
            cell_floor: DEFAULT_CELL_FLOOR,
            cov_draws: 500,
            seed: 0,
            force_general: false,
        }
    }
}

pub(crate) fn flatten(table: &DistTable) -> Vec<f64> {
    let mut p = Vec::with_capacity(2 * table.k() * table.q());
    for d in 0..2 {
        p.extend_from_slice(table.arm(d));
    }
    p
}

fn p_index(k: usize, q: usize, d: usize, kk: usize, qq: usize) -> usize {
    d * k * q + kk * q + qq
}

/// Independent units of one arm as lists of row indices, in order of first
/// appearance.
fn group_units(records: &RecordSet, arm_of: impl Fn(&Record) -> u8) -> [Vec<Vec<usize>>; 2] {
    let mut arms: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    let mut seen: HashMap<(u8, &str), usize> = HashMap::new();
    for (i, r) in records.rows().iter().enumerate() {
        let a = arm_of(r);
        match &r.cluster {
            Some(c) => {
                let slot = *seen.entry((a, c.as_str())).or_insert_with(|| {
                    arms[a as usize].push(Vec::new());
                    arms[a as usize].len() - 1
                });
                arms[a as usize][slot].push(i);
            }
            None => arms[a as usize].push(vec![i]),
        }
    }
    arms
}

/// Multinomial (iid) or cluster-robust covariance of the cell frequencies.
fn analytic_cov(p_hat: &[f64], cells: &[Vec<Vec<usize>>; 2], clustered: bool) -> Vec<Vec<f64>> {
    let n = p_hat.len();
    let half = n / 2;
    let mut cov = vec![vec![0.0; n]; n];
    for (d, units) in cells.iter().enumerate() {
        let off = d * half;
        let p = &p_hat[off..off + half];
        let size: usize = units.iter().map(|u| u.len()).sum();
        let total = size as f64;
        if !clustered {
            for i in 0..half {
                for j in 0..half {
                    let diag = if i == j { p[i] } else { 0.0 };
                    cov[off + i][off + j] = (diag - p[i] * p[j]) / total;
                }
            }
            continue;
        }
        for u in units {
            let mut dev: Vec<f64> = p.iter().map(|pi| -(u.len() as f64) * pi).collect();
            for &c in u {
                dev[c - off] += 1.0;
            }
            dev.iter_mut().for_each(|v| *v /= total);
            for i in 0..half {
                if dev[i] == 0.0 {
                    continue;
                }
                for j in 0..half {
                    cov[off + i][off + j] += dev[i] * dev[j];
                }
            }
        }
    }
    cov
}

fn bootstrap_cov(resampler: &Resampler, p_hat: &[f64], draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    use rand::SeedableRng;
    use rayon::prelude::*;
    let reps: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(COV_STREAM_BASE + b as u64);
            resampler.draw(p_hat, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = p_hat.len();
    let mean: Vec<f64> = (0..n).map(|i| reps.iter().map(|r| r[i]).sum::<f64>() / draws as f64).collect();
    let mut cov = vec![vec![0.0; n]; n];
    for r in &reps {
        for i in 0..n {
            let di = r[i] - mean[i];
            if di == 0.0 {
                continue;
            }
            for j in 0..n {
                cov[i][j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (draws.max(2) - 1) as f64;
    cov.iter_mut().flatten().for_each(|v| *v /= denom);
    Ok(cov)
}

/// Bootstrap streams for covariance estimation start here so they never
/// overlap the test's replicate streams `1..=B`.
const COV_STREAM_BASE: u64 = 1 << 40;

/// Assembles the moment system from unit-level records.
pub fn build_moment_system(records: &RecordSet, r: &RestrictionSet, opts: &MomentOptions) -> Result<MomentSystem> {
    let support = register_support(records)?;
    let levels = opts.bins.levels(records)?;
    let table = opts.strategy.estimate_in(records, &support, &levels, Some(MAX_CLIPPED_MASS))?;
    let p_hat = flatten(&table);
    let (k, q) = (table.k(), table.q());

    let resampler = match opts.strategy {
        Strategy::Randomized => {
            let units = group_units(records, |r| r.d);
            let cells = units.map(|arm| {
                arm.into_iter()
                    .map(|u| {
                        u.into_iter()
                            .map(|i| {
                                let row = &records.rows()[i];
                                let kk = support.index_of(&row.m).expect("registered support");
                                let qq = levels.iter().position(|l| l.contains(row.y)).expect("levels cover outcomes");
                                p_index(k, q, row.d as usize, kk, qq)
                            })
                            .collect()
                    })
                    .collect()
            });
            Resampler::Cells { arms: cells }
        }
        _ => Resampler::Records {
            records: records.clone(),
            strategy: opts.strategy.clone(),
            support: support.clone(),
            levels: levels.clone(),
            strata: group_units(records, |row| opts.strategy.stratum(row)),
        },
    };
    let cov = match &resampler {
        Resampler::Cells { arms } => analytic_cov(&p_hat, arms, records.has_clusters()),
        other => bootstrap_cov(other, &p_hat, opts.cov_draws.max(2), opts.seed)?,
    };
    let n_eff = match &resampler {
        Resampler::Cells { arms } | Resampler::Records { strata: arms, .. } => arms[0].len() + arms[1].len(),
        Resampler::Gaussian { .. } => unreachable!(),
    };

    let mut warnings = Vec::new();
    let units_per_arm = match &resampler {
        Resampler::Cells { arms } | Resampler::Records { strata: arms, .. } => [arms[0].len(), arms[1].len()],
        Resampler::Gaussian { .. } => unreachable!(),
    };
    let mut thin = 0;
    for d in 0..2 {
        for kk in 0..k {
            for qq in 0..q {
                let expected = table.mass(d, kk, qq) * units_per_arm[d] as f64;
                if expected < opts.cell_floor {
                    thin += 1;
                }
            }
        }
    }
    if thin > 0 {
        let msg = format!(
            "{thin} of {} (D, M, Y) cells have fewer than {} expected independent observations; \
             tests may be unreliable (rule of thumb: at least 15 per cell)",
            2 * k * q,
            opts.cell_floor
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut system =
        assemble(&table, r, opts.nu_ub.as_deref(), opts.allow_relax, opts.force_general, p_hat, cov, n_eff, resampler)?;
    system.strategy = opts.strategy.label().to_string();
    system.clustered = records.has_clusters();
    system.warnings.extend(warnings);
    Ok(system)
}

/// Assembles the system from a table with a known covariance, e.g. a
/// population law. Bootstrap replicates are Gaussian around `p`.
pub fn moment_system_from_table(
    table: &DistTable,
    r: &RestrictionSet,
    nu_ub: Option<&[f64]>,
    cov: Vec<Vec<f64>>,
    n_eff: usize,
) -> Result<MomentSystem> {
    let p = flatten(table);
    if cov.len() != p.len() || cov.iter().any(|row| row.len() != p.len()) {
        return Err(Error::Structural(format!("covariance must be {0}×{0}", p.len())));
    }
    let m = DMatrix::from_fn(p.len(), p.len(), |i, j| 0.5 * (cov[i][j] + cov[j][i]));
    let eig = SymmetricEigen::new(m);
    let mut factor = eig.eigenvectors.clone();
    for (c, &l) in eig.eigenvalues.iter().enumerate() {
        factor.column_mut(c).scale_mut(l.max(0.0).sqrt());
    }
    assemble(table, r, nu_ub, false, false, p, cov, n_eff, Resampler::Gaussian { factor })
}

/// Multinomial covariance of the cell frequencies of `table` with `n[d]`
/// independent draws in arm `d`.
pub fn multinomial_cov(table: &DistTable, n: [usize; 2]) -> Vec<Vec<f64>> {
    let p = flatten(table);
    let half = p.len() / 2;
    let mut cov = vec![vec![0.0; p.len()]; p.len()];
    for d in 0..2 {
        let off = d * half;
        for i in 0..half {
            for j in 0..half {
                let diag = if i == j { p[off + i] } else { 0.0 };
                cov[off + i][off + j] = (diag - p[off + i] * p[off + j]) / n[d] as f64;
            }
        }
    }
    cov
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    table: &DistTable,
    r: &RestrictionSet,
    nu_ub: Option<&[f64]>,
    allow_relax: bool,
    force_general: bool,
    p_hat: Vec<f64>,
    cov: Vec<Vec<f64>>,
    n_eff: usize,
    resampler: Resampler,
) -> Result<MomentSystem> {
    let (k, q) = (table.k(), table.q());
    if r.k() != k {
        return Err(Error::Structural(format!("restriction is for {} mediator values, data have {k}", r.k())));
    }
    let nu_ub = match nu_ub {
        None => vec![0.0; k],
        Some(v) if v.len() == k => v.to_vec(),
        Some(v) if v.len() == 1 => vec![v[0]; k],
        Some(v) => return Err(Error::Structural(format!("nu_ub has {} entries for {k} mediator values", v.len()))),
    };
    if nu_ub.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("nu_ub entries must lie in [0, 1]".into()));
    }

    // An identified set that is empty at p̂ is not an error here: the
    // marginal rows are moments, so the emptiness shows up in the statistic.
    let spec = build_identified_set(table, r)?;
    let mut notes = Vec::new();
    let (restriction, relaxed_dbar) = if spec.is_feasible() {
        (r.clone(), None)
    } else if allow_relax && r.kind().is_monotone_like() {
        let (relaxed, dbar) = auto_relax(&spec, table.support())?;
        (relaxed.restriction().clone(), dbar)
    } else {
        notes.push(format!("identified set under {} is empty at the point estimate", r.label()));
        (r.clone(), None)
    };

    let n_p = 2 * k * q;
    let binary = k == 2
        && table.support().order() == MediatorOrder::Total
        && matches!(restriction.kind(), RestrictionKind::Monotone)
        && nu_ub.iter().all(|&v| v == 0.0)
        && !force_general;

    let mut c1: Vec<Vec<f64>> = Vec::new();
    let mut c2: Vec<Vec<f64>> = Vec::new();
    let mut rows: Vec<RowInfo> = Vec::new();
    let pi = |d, kk, qq| p_index(k, q, d, kk, qq);

    if binary {
        for (kk, kind) in [(0, RowKind::NeverTaker), (1, RowKind::AlwaysTaker)] {
            // Never-takers: −C₂p = P(y, 0 | 0) − P(y, 0 | 1); always-takers mirror it.
            let (plus, minus) = if kk == 0 { (1, 0) } else { (0, 1) };
            for qq in 0..q {
                let mut c = vec![0.0; n_p];
                c[pi(plus, kk, qq)] = 1.0;
                c[pi(minus, kk, qq)] = -1.0;
                c2.push(c);
                c1.push(Vec::new());
                rows.push(RowInfo { kind, k: Some(kk), q: Some(qq) });
            }
        }
    } else {
        let n_theta = k * k;
        let n_w = n_theta + k * q;
        let delta = |kk: usize, qq: usize| n_theta + kk * q + qq;
        for kk in 0..k {
            let mut a = vec![0.0; n_w];
            a[theta_index(k, kk, kk)] = -(1.0 - nu_ub[kk]);
            for qq in 0..q {
                a[delta(kk, qq)] = -1.0;
            }
            let mut c = vec![0.0; n_p];
            for qq in 0..q {
                c[pi(1, kk, qq)] = -1.0;
            }
            c1.push(a);
            c2.push(c);
            rows.push(RowInfo { kind: RowKind::Budget, k: Some(kk), q: None });
            for qq in 0..q {
                let mut a = vec![0.0; n_w];
                a[delta(kk, qq)] = 1.0;
                let mut c = vec![0.0; n_p];
                c[pi(1, kk, qq)] = 1.0;
                c[pi(0, kk, qq)] = -1.0;
                c1.push(a);
                c2.push(c);
                rows.push(RowInfo { kind: RowKind::Excess, k: Some(kk), q: Some(qq) });
            }
            for qq in 0..q {
                let mut a = vec![0.0; n_w];
                a[delta(kk, qq)] = 1.0;
                c1.push(a);
                c2.push(vec![0.0; n_p]);
                rows.push(RowInfo { kind: RowKind::ExcessSign, k: Some(kk), q: Some(qq) });
            }
        }
        // Σ_k θ_lk = P(M = m_l | 0) and Σ_l θ_lk = P(M = m_k | 1), each as a pair.
        for (d, kk) in (0..2).flat_map(|d| (0..k).map(move |kk| (d, kk))) {
            let mut a = vec![0.0; n_w];
            for j in 0..k {
                let idx = if d == 0 { theta_index(k, kk, j) } else { theta_index(k, j, kk) };
                a[idx] = 1.0;
            }
            let mut c = vec![0.0; n_p];
            for qq in 0..q {
                c[pi(d, kk, qq)] = 1.0;
            }
            for sign in [1.0, -1.0] {
                c1.push(a.iter().map(|v| sign * v).collect());
                c2.push(c.iter().map(|v| sign * v).collect());
                rows.push(RowInfo { kind: RowKind::Marginal, k: Some(kk), q: None });
            }
        }
        // c − Bθ̃ ≥ 0, with the constant written as c times the control-arm total.
        for (b, &rhs) in restriction.rows().iter().zip(restriction.rhs()) {
            let mut a = vec![0.0; n_w];
            for (j, v) in b.iter().enumerate() {
                a[j] = -v;
            }
            let mut c = vec![0.0; n_p];
            for kk in 0..k {
                for qq in 0..q {
                    c[pi(0, kk, qq)] = -rhs;
                }
            }
            c1.push(a);
            c2.push(c);
            rows.push(RowInfo { kind: RowKind::Restriction, k: None, q: None });
        }
    }

    Ok(MomentSystem {
        c1,
        c2,
        p_hat,
        cov,
        n_eff,
        rows,
        k,
        q,
        nu_ub,
        restriction: restriction.label(),
        relaxed_dbar,
        nuisance_free: binary,
        strategy: Strategy::Randomized.label().to_string(),
        clustered: false,
        warnings: notes,
        resampler,
    })
}

/// Outcome of a test at one level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub draws: Option<usize>,
    pub seed: Option<u64>,
    /// Degrees of freedom of the chi-squared reference distribution.
    pub df: Option<usize>,
    pub n_eff: usize,
    pub n_moments: usize,
    pub nuisance_free: bool,
    pub restriction: String,
    pub relaxed_dbar: Option<f64>,
    pub notes: Vec<String>,
}

/// Test family used by [`run_test`] and [`p_value_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum TestMethod {
    LfBoot { draws: usize, seed: u64 },
    CondChisq,
}

impl TestMethod {
    pub fn parse(name: &str, draws: usize, seed: u64) -> Result<Self> {
        match name {
            "lf-boot" => Ok(TestMethod::LfBoot { draws, seed }),
            "cond-chisq" => Ok(TestMethod::CondChisq),
            other => Err(Error::Structural(format!("unknown test method `{other}` (expected lf-boot or cond-chisq)"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TestMethod::LfBoot { .. } => "lf-boot",
            TestMethod::CondChisq => "cond-chisq",
        }
    }
}

pub fn run_test(system: &MomentSystem, method: TestMethod, alpha: f64) -> Result<TestResult> {
    match method {
        TestMethod::LfBoot { draws, seed } => test_least_favorable_bootstrap(system, alpha, draws, seed),
        TestMethod::CondChisq => test_conditional_chisq(system, alpha),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Rejection decisions over a grid of levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PValueCurve {
    pub method: String,
    /// `(α, reject)` in increasing `α`.
    pub points: Vec<(f64, bool)>,
    /// Smallest rejecting `α` on the grid, or `1.0` when none rejects.
    pub smallest_rejecting: f64,
}

/// `0.01, 0.02, …, 0.10, 0.15, 0.25, …, 0.95`.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..=10).map(|i| i as f64 / 100.0).collect();
    g.extend((0..9).map(|i| 0.15 + 0.1 * i as f64));
    g
}

/// Evaluates the test at every level of `grid`. Rejection is made monotone
/// in `α` by carrying a rejection forward to all larger levels.
pub fn p_value_curve(system: &MomentSystem, method: TestMethod, grid: &[f64]) -> Result<PValueCurve> {
    let mut grid = grid.to_vec();
    grid.iter().try_for_each(|&a| check_alpha(a))?;
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    let decide: Box<dyn Fn(f64) -> bool> = match method {
        TestMethod::LfBoot { draws, seed } => {
            let (stat, boot) = lfboot::statistic_and_draws(system, draws, seed)?;
            Box::new(move |a| stat > lfboot::critical_value(&boot, a))
        }
        TestMethod::CondChisq => {
            let fit = chisq::fit(system)?;
            Box::new(move |a| fit.rejects(a))
        }
    };
    let mut points = Vec::with_capacity(grid.len());
    let mut seen = false;
    for a in grid {
        seen |= decide(a);
        points.push((a, seen));
    }
    let smallest_rejecting = points.iter().find(|p| p.1).map_or(1.0, |p| p.0);
    Ok(PValueCurve { method: method.label().into(), points, smallest_rejecting })
}
