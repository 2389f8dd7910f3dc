//! Arm-wise `(Y, M)` laws under identification strategies other than a
//! randomized treatment: a binary instrument, a known propensity score, and a
//! misclassified mediator with known misclassification matrix.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bounds::{resolve_identified_set, sharp_null_slack_on};
use crate::error::{Error, Result};
use crate::probtab::{from_records, from_records_in, register_support, DistTable, MediatorSupport, OutcomeLevel};
use crate::probtab::{Record, RecordSet};
use crate::typeshares::RestrictionSet;

/// Largest total clipped mass per arm accepted from a ratio estimator.
pub const MAX_CLIPPED_MASS: f64 = 0.05;
/// First-stage strengths below this are treated as no first stage.
pub const MIN_FIRST_STAGE: f64 = 1e-6;
/// Default propensity trimming threshold.
pub const DEFAULT_OVERLAP: f64 = 0.01;
/// Slack above this counts as a violation when comparing verdicts.
const REJECT_SLACK: f64 = 1e-9;

/// How the arm-wise laws are identified.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Randomized,
    Iv,
    Ipw {
        overlap: f64,
    },
    /// `l[i][j] = P(M̃ = m_i | M = m_j)`.
    MeasurementError {
        l: Vec<Vec<f64>>,
    },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Randomized => "randomized",
            Strategy::Iv => "iv",
            Strategy::Ipw { .. } => "ipw",
            Strategy::MeasurementError { .. } => "measurement_error",
        }
    }

    /// Arm used to stratify resampling: the instrument for IV, the treatment
    /// otherwise.
    pub fn stratum(&self, row: &Record) -> u8 {
        match self {
            Strategy::Iv => row.z.unwrap_or(0),
            _ => row.d,
        }
    }

    /// Estimates the arm-wise table on a fixed support and outcome grid.
    ///
    /// With `max_clip = None` the clipping guard of the ratio estimators is
    /// skipped (used for bootstrap redraws).
    pub fn estimate_in(
        &self,
        records: &RecordSet,
        support: &MediatorSupport,
        levels: &[OutcomeLevel],
        max_clip: Option<f64>,
    ) -> Result<DistTable> {
        match self {
            Strategy::Randomized => from_records_in(records, support, levels.to_vec()),
            Strategy::Iv => {
                let joint = ZJoint::from_records_in(records, support, levels)?;
                Ok(iv_complier_from_joint(&joint, max_clip)?.table)
            }
            Strategy::Ipw { overlap } => Ok(ipw_marginals_in(records, support, levels, *overlap)?.table),
            Strategy::MeasurementError { l } => {
                let observed = from_records_in(records, support, levels.to_vec())?;
                Ok(correct_measurement_error(&observed, l)?.table)
            }
        }
    }
}

/// The randomized-treatment table; any instrument column is ignored.
pub fn randomized_marginals(records: &RecordSet) -> Result<DistTable> {
    from_records(records)
}

/// `P(D = d, M = m_k, Y = y_q | Z = z)` for a binary instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ZJoint {
    support: MediatorSupport,
    levels: Vec<OutcomeLevel>,
    /// Flat `[z][d][k][q]`.
    mass: Vec<f64>,
}

impl ZJoint {
    /// From nested `[z][d][k][q]` probabilities, each `z` summing to one.
    pub fn new(support: MediatorSupport, levels: Vec<OutcomeLevel>, nested: [[Vec<Vec<f64>>; 2]; 2]) -> Result<Self> {
        let (k, q) = (support.len(), levels.len());
        let mut mass = Vec::with_capacity(4 * k * q);
        for (z, by_d) in nested.iter().enumerate() {
            let mut total = 0.0;
            for arm in by_d {
                if arm.len() != k || arm.iter().any(|r| r.len() != q) {
                    return Err(Error::Structural(format!("instrument arm {z} is not {k}×{q}")));
                }
                for row in arm {
                    for &v in row {
                        if !(v >= 0.0) {
                            return Err(Error::Structural(format!("negative mass {v} in instrument arm {z}")));
                        }
                        total += v;
                        mass.push(v);
                    }
                }
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Structural(format!("instrument arm {z} sums to {total}")));
            }
        }
        Ok(ZJoint { support, levels, mass })
    }

    /// Empirical frequencies within each instrument arm.
    pub fn from_records(records: &RecordSet) -> Result<Self> {
        let support = register_support(records)?;
        Self::from_records_in(records, &support, &observed_levels(records))
    }

    pub fn from_records_in(records: &RecordSet, support: &MediatorSupport, levels: &[OutcomeLevel]) -> Result<Self> {
        if !records.has_instrument() {
            return Err(Error::Structural("the instrument strategy needs a `z` column".into()));
        }
        let (k, q) = (support.len(), levels.len());
        let mut counts = vec![0.0; 4 * k * q];
        let mut n = [0usize; 2];
        for (i, r) in records.rows().iter().enumerate() {
            let z = r.z.expect("validated instrument column") as usize;
            let m = support
                .index_of(&r.m)
                .ok_or_else(|| Error::Structural(format!("row {i}: mediator value {:?} not in support", r.m)))?;
            let y = levels
                .iter()
                .position(|l| l.contains(r.y))
                .ok_or_else(|| Error::Structural(format!("row {i}: outcome {} outside the outcome grid", r.y)))?;
            counts[((z * 2 + r.d as usize) * k + m) * q + y] += 1.0;
            n[z] += 1;
        }
        for (z, &nz) in n.iter().enumerate() {
            if nz == 0 {
                return Err(Error::Estimation(format!("no rows with z = {z}")));
            }
            let block = &mut counts[z * 2 * k * q..(z + 1) * 2 * k * q];
            block.iter_mut().for_each(|v| *v /= nz as f64);
        }
        Ok(ZJoint { support: support.clone(), levels: levels.to_vec(), mass: counts })
    }

    pub fn support(&self) -> &MediatorSupport {
        &self.support
    }

    pub fn levels(&self) -> &[OutcomeLevel] {
        &self.levels
    }

    fn kq(&self) -> (usize, usize) {
        (self.support.len(), self.levels.len())
    }

    pub fn mass(&self, z: usize, d: usize, k: usize, q: usize) -> f64 {
        let (kk, qq) = self.kq();
        self.mass[((z * 2 + d) * kk + k) * qq + q]
    }

    /// `α_C = P(D = 1 | Z = 1) − P(D = 1 | Z = 0)`.
    pub fn first_stage(&self) -> f64 {
        let (k, q) = self.kq();
        let p = |z| (0..k).flat_map(|m| (0..q).map(move |y| (m, y))).map(|(m, y)| self.mass(z, 1, m, y)).sum::<f64>();
        p(1) - p(0)
    }

    /// The table obtained by treating `Z` as the treatment and ignoring `D`.
    pub fn relabel_table(&self) -> Result<DistTable> {
        let (k, q) = self.kq();
        let arm = |z: usize| -> Vec<Vec<f64>> {
            (0..k).map(|m| (0..q).map(|y| self.mass(z, 0, m, y) + self.mass(z, 1, m, y)).collect()).collect()
        };
        DistTable::new(self.support.clone(), self.levels.clone(), [arm(0), arm(1)])
    }
}

fn observed_levels(records: &RecordSet) -> Vec<OutcomeLevel> {
    let mut ys = records.outcomes();
    ys.sort_by(|a, b| a.total_cmp(b));
    ys.dedup();
    ys.into_iter().map(OutcomeLevel::Point).collect()
}

/// Instrument-complier laws with the adjustments made to obtain them.
#[derive(Debug, Clone, PartialEq)]
pub struct IvMarginals {
    pub table: DistTable,
    pub alpha_c: f64,
    /// Total negative mass set to zero, per arm.
    pub clipped_mass: [f64; 2],
}

/// Wald ratios with compound outcomes `D·1{Y = y, M = m_k}` (treated arm)
/// and `−(1 − D)·1{Y = y, M = m_k}` (control arm).
pub fn iv_complier_from_joint(joint: &ZJoint, max_clip: Option<f64>) -> Result<IvMarginals> {
    let alpha = joint.first_stage();
    if !(alpha >= MIN_FIRST_STAGE) {
        return Err(Error::Estimation(format!("weak or zero first stage: P(D=1|Z=1) − P(D=1|Z=0) = {alpha:.3e}")));
    }
    let (k, q) = joint.kq();
    let mut arms: [Vec<Vec<f64>>; 2] = [vec![vec![0.0; q]; k], vec![vec![0.0; q]; k]];
    let mut clipped = [0.0; 2];
    for m in 0..k {
        for y in 0..q {
            arms[1][m][y] = (joint.mass(1, 1, m, y) - joint.mass(0, 1, m, y)) / alpha;
            arms[0][m][y] = (joint.mass(0, 0, m, y) - joint.mass(1, 0, m, y)) / alpha;
        }
    }
    for d in 0..2 {
        for v in arms[d].iter_mut().flatten() {
            if *v < 0.0 {
                clipped[d] -= *v;
                *v = 0.0;
            }
        }
        if let Some(limit) = max_clip {
            if clipped[d] > limit {
                return Err(Error::Estimation(format!(
                    "complier estimates for arm {d} have negative mass {:.4} beyond the {limit} tolerance",
                    clipped[d]
                )));
            }
        }
        let total: f64 = arms[d].iter().flatten().sum();
        if total <= 0.0 {
            return Err(Error::Estimation(format!("complier estimates for arm {d} carry no mass")));
        }
        if clipped[d] > 0.0 {
            log::warn!("clipped {:.3e} negative complier mass in arm {d}; renormalized from {total:.6}", clipped[d]);
        }
        arms[d].iter_mut().flatten().for_each(|v| *v /= total);
    }
    let table = DistTable::new(joint.support.clone(), joint.levels.clone(), arms)?;
    Ok(IvMarginals { table, alpha_c: alpha, clipped_mass: clipped })
}

/// Instrument-complier laws estimated from records with a `z` column.
pub fn iv_complier_marginals(records: &RecordSet) -> Result<IvMarginals> {
    iv_complier_from_joint(&ZJoint::from_records(records)?, Some(MAX_CLIPPED_MASS))
}

/// Verdicts of the complier route and the relabeled-instrument route.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IvComparison {
    pub slack_complier: f64,
    pub slack_relabel: f64,
    pub reject_complier: bool,
    pub reject_relabel: bool,
    pub agree: bool,
    /// Defier budgets substituted when a monotone restriction was empty.
    pub relaxed_dbar_complier: Option<f64>,
    pub relaxed_dbar_relabel: Option<f64>,
}

/// Compares the sharp-null slack on the complier laws with the slack obtained
/// by treating the instrument as a randomized treatment.
pub fn iv_relabel_comparison_joint(joint: &ZJoint, r: &RestrictionSet) -> Result<IvComparison> {
    let complier = iv_complier_from_joint(joint, Some(MAX_CLIPPED_MASS))?.table;
    let relabel = joint.relabel_table()?;
    let (spec_a, relax_a) = resolve_identified_set(&complier, r, true)?;
    let (spec_b, relax_b) = resolve_identified_set(&relabel, r, true)?;
    let a = sharp_null_slack_on(&spec_a, &complier, 0.0)?.value;
    let b = sharp_null_slack_on(&spec_b, &relabel, 0.0)?.value;
    let (ra, rb) = (a > REJECT_SLACK, b > REJECT_SLACK);
    Ok(IvComparison {
        slack_complier: a,
        slack_relabel: b,
        reject_complier: ra,
        reject_relabel: rb,
        agree: ra == rb,
        relaxed_dbar_complier: relax_a,
        relaxed_dbar_relabel: relax_b,
    })
}

pub fn iv_relabel_comparison(records: &RecordSet, r: &RestrictionSet) -> Result<IvComparison> {
    iv_relabel_comparison_joint(&ZJoint::from_records(records)?, r)
}

/// Instrument response type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstrumentType {
    Complier,
    NeverTaker,
    AlwaysTaker,
}

/// One homogeneous group of a population with a binary instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationGroup {
    pub share: f64,
    pub instrument_type: InstrumentType,
    /// `M(0)` and `M(1)` as support indices.
    pub m0: usize,
    pub m1: usize,
    /// Laws of `Y(0, M(0))` and `Y(1, M(1))` on the outcome grid.
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Exact `P(D, M, Y | Z)` for a population of groups satisfying the
/// instrument exclusion and independence conditions.
pub fn population_joint(
    support: MediatorSupport,
    levels: Vec<OutcomeLevel>,
    groups: &[PopulationGroup],
) -> Result<ZJoint> {
    let (k, q) = (support.len(), levels.len());
    let total: f64 = groups.iter().map(|g| g.share).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Structural(format!("group shares sum to {total}")));
    }
    let mut nested: [[Vec<Vec<f64>>; 2]; 2] = Default::default();
    for by_d in nested.iter_mut() {
        for arm in by_d.iter_mut() {
            *arm = vec![vec![0.0; q]; k];
        }
    }
    for g in groups {
        if g.m0 >= k || g.m1 >= k || g.y0.len() != q || g.y1.len() != q {
            return Err(Error::Structural("population group does not match the support".into()));
        }
        for z in 0..2 {
            let d = match g.instrument_type {
                InstrumentType::Complier => z,
                InstrumentType::NeverTaker => 0,
                InstrumentType::AlwaysTaker => 1,
            };
            let (m, law) = if d == 1 { (g.m1, &g.y1) } else { (g.m0, &g.y0) };
            for y in 0..q {
                nested[z][d][m][y] += g.share * law[y];
            }
        }
    }
    ZJoint::new(support, levels, nested)
}

/// Inverse-propensity-weighted laws with the per-arm normalizing sums.
#[derive(Debug, Clone, PartialEq)]
pub struct IpwMarginals {
    pub table: DistTable,
    /// Weighted totals before renormalization, per arm.
    pub raw_totals: [f64; 2],
}

/// `P(Y = y, M = m_k | do(D = d))` as sample means of `D/p(X)·1{…}` and
/// `(1−D)/(1−p(X))·1{…}`, renormalized per arm.
pub fn ipw_marginals(records: &RecordSet, overlap: f64) -> Result<IpwMarginals> {
    let table = from_records(records)?;
    ipw_marginals_in(records, table.support(), table.levels(), overlap)
}

pub fn ipw_marginals_in(
    records: &RecordSet,
    support: &MediatorSupport,
    levels: &[OutcomeLevel],
    overlap: f64,
) -> Result<IpwMarginals> {
    if !records.has_pscore() {
        return Err(Error::Structural("the propensity strategy needs a `pscore` column".into()));
    }
    if !(0.0..0.5).contains(&overlap) {
        return Err(Error::Domain(format!("overlap threshold must lie in [0, 0.5), got {overlap}")));
    }
    let bad: Vec<usize> = records
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            let p = r.pscore.expect("validated propensity column");
            !(p > overlap && p < 1.0 - overlap)
        })
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(20).map(|i| i.to_string()).collect();
        return Err(Error::Estimation(format!(
            "propensity outside ({overlap}, {}) in {} rows: {}{}",
            1.0 - overlap,
            bad.len(),
            shown.join(", "),
            if bad.len() > 20 { ", …" } else { "" }
        )));
    }
    let (k, q) = (support.len(), levels.len());
    let mut arms: [Vec<Vec<f64>>; 2] = [vec![vec![0.0; q]; k], vec![vec![0.0; q]; k]];
    let n = records.len() as f64;
    for (i, r) in records.rows().iter().enumerate() {
        let m = support
            .index_of(&r.m)
            .ok_or_else(|| Error::Structural(format!("row {i}: mediator value {:?} not in support", r.m)))?;
        let y = levels
            .iter()
            .position(|l| l.contains(r.y))
            .ok_or_else(|| Error::Structural(format!("row {i}: outcome {} outside the outcome grid", r.y)))?;
        let p = r.pscore.expect("validated propensity column");
        let w = if r.d == 1 { 1.0 / p } else { 1.0 / (1.0 - p) };
        arms[r.d as usize][m][y] += w / n;
    }
    let mut raw = [0.0; 2];
    for d in 0..2 {
        raw[d] = arms[d].iter().flatten().sum();
        if raw[d] <= 0.0 {
            return Err(Error::Estimation(format!("no rows in arm {d}")));
        }
        log::info!("inverse-propensity weights in arm {d} sum to {:.6}; renormalized", raw[d]);
        arms[d].iter_mut().flatten().for_each(|v| *v /= raw[d]);
    }
    let table = DistTable::new(support.clone(), levels.to_vec(), arms)?
        .with_counts([records.arm_size(0), records.arm_size(1)], [records.arm_clusters(0), records.arm_clusters(1)]);
    Ok(IpwMarginals { table, raw_totals: raw })
}

/// Mediator-corrected table with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MeCorrection {
    pub table: DistTable,
    /// Ratio of extreme singular values of `L`.
    pub condition_number: f64,
    /// Total magnitude of small negative solutions set to zero.
    pub clipped_mass: f64,
}

fn misclassification_matrix(l: &[Vec<f64>], k: usize) -> Result<DMatrix<f64>> {
    if l.len() != k || l.iter().any(|r| r.len() != k) {
        return Err(Error::Structural(format!("misclassification matrix must be {k}×{k}")));
    }
    if l.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(Error::Structural("misclassification probabilities must be nonnegative".into()));
    }
    for j in 0..k {
        let s: f64 = l.iter().map(|r| r[j]).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Structural(format!("column {j} of the misclassification matrix sums to {s}")));
        }
    }
    Ok(DMatrix::from_fn(k, k, |i, j| l[i][j]))
}

/// Applies `p̃ = L p` to every `(d, y)` slice of the mediator cells.
pub fn misclassify(table: &DistTable, l: &[Vec<f64>]) -> Result<DistTable> {
    let (k, q) = (table.k(), table.q());
    let lm = misclassification_matrix(l, k)?;
    let mut arms = table.arms();
    for d in 0..2 {
        for y in 0..q {
            let p = DVector::from_fn(k, |m, _| table.mass(d, m, y));
            let obs = &lm * p;
            for m in 0..k {
                arms[d][m][y] = obs[m];
            }
        }
    }
    Ok(DistTable::new(table.support().clone(), table.levels().to_vec(), arms)?
        .with_counts(table.n_units(), table.n_clusters()))
}

/// Recovers the true-mediator table from the observed one by solving
/// `p = L⁻¹ p̃` for every `(d, y)`.
pub fn correct_measurement_error(observed: &DistTable, l: &[Vec<f64>]) -> Result<MeCorrection> {
    let (k, q) = (observed.k(), observed.q());
    let lm = misclassification_matrix(l, k)?;
    let sv = lm.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if smin < 1e-12 {
        return Err(Error::Domain(format!(
            "misclassification matrix is singular (smallest singular value {smin:.3e})"
        )));
    }
    let lu = lm.lu();
    let mut arms = observed.arms();
    let mut clipped = 0.0;
    for d in 0..2 {
        for y in 0..q {
            let obs = DVector::from_fn(k, |m, _| observed.mass(d, m, y));
            let p =
                lu.solve(&obs).ok_or_else(|| Error::Domain("misclassification matrix could not be inverted".into()))?;
            for m in 0..k {
                let v = p[m];
                if v < -1e-8 {
                    return Err(Error::Estimation(format!(
                        "observed table is incoherent with the misclassification matrix: corrected mass {v:.3e} at arm {d}, mediator {m}, outcome {y}"
                    )));
                }
                if v < 0.0 {
                    clipped -= v;
                }
                arms[d][m][y] = v.max(0.0);
            }
        }
    }
    if clipped > 0.0 {
        log::warn!("clipped {clipped:.3e} negative mass after misclassification correction");
        for arm in arms.iter_mut() {
            let s: f64 = arm.iter().flatten().sum();
            arm.iter_mut().flatten().for_each(|v| *v /= s);
        }
    }
    let table = DistTable::new(observed.support().clone(), observed.levels().to_vec(), arms)?
        .with_counts(observed.n_units(), observed.n_clusters());
    Ok(MeCorrection { table, condition_number: smax / smin, clipped_mass: clipped })
}

/// Support registered from records, exposed for callers that fix a grid
/// before resampling.
pub fn support_of(records: &RecordSet) -> Result<MediatorSupport> {
    register_support(records)
}
