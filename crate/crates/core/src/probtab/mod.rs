//! Arm-wise joint distributions of the outcome and the mediator.

mod records;

use std::collections::BTreeMap;

use serde::Serialize;

pub use records::{Record, RecordSet};

use crate::error::{Error, Result};

/// Tolerance for the per-arm normalization of a table.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MediatorOrder {
    /// Scalar support sorted strictly increasing.
    Total,
    /// Vector support compared coordinatewise.
    Partial,
}

/// The K support points of the mediator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MediatorSupport {
    points: Vec<Vec<f64>>,
    order: MediatorOrder,
}

impl MediatorSupport {
    pub fn new(points: Vec<Vec<f64>>, order: MediatorOrder) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Structural("mediator support is empty".into()));
        }
        let p = points[0].len();
        if p == 0 || points.iter().any(|x| x.len() != p) {
            return Err(Error::Structural("mediator points must share a positive dimension".into()));
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::Structural(format!("duplicate mediator point {:?}", points[i])));
                }
            }
        }
        if order == MediatorOrder::Total {
            if p != 1 {
                return Err(Error::Structural("a total order needs a scalar mediator".into()));
            }
            if points.windows(2).any(|w| w[0][0] >= w[1][0]) {
                return Err(Error::Structural("totally ordered support must be strictly increasing".into()));
            }
        }
        Ok(MediatorSupport { points, order })
    }

    /// Totally ordered scalar support `0, 1, …, k-1`.
    pub fn ordinal(k: usize) -> Self {
        MediatorSupport { points: (0..k).map(|i| vec![i as f64]).collect(), order: MediatorOrder::Total }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn order(&self) -> MediatorOrder {
        self.order
    }

    pub fn index_of(&self, m: &[f64]) -> Option<usize> {
        self.points.iter().position(|p| p.as_slice() == m)
    }

    /// Coordinatewise `m_l ⪯ m_k`.
    pub fn precedes(&self, l: usize, k: usize) -> bool {
        self.points[l].iter().zip(&self.points[k]).all(|(a, b)| a <= b)
    }

    /// Euclidean distance between two support points.
    pub fn distance(&self, l: usize, k: usize) -> f64 {
        self.points[l].iter().zip(&self.points[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// An outcome cell: a single value or a right-closed interval `(lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLevel {
    Point(f64),
    Bin { lower: f64, upper: f64 },
}

impl OutcomeLevel {
    /// The numeric value of a point level.
    pub fn value(&self) -> Option<f64> {
        match *self {
            OutcomeLevel::Point(v) => Some(v),
            OutcomeLevel::Bin { .. } => None,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        match *self {
            OutcomeLevel::Point(v) => v == y,
            OutcomeLevel::Bin { lower, upper } => y > lower && y <= upper,
        }
    }
}

/// Joint law of `(Y, M)` in each treatment arm.
///
/// `mass(d, k, q) = P(Y = y_q, M = m_k | D = d)`; each arm sums to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistTable {
    support: MediatorSupport,
    levels: Vec<OutcomeLevel>,
    mass: Vec<f64>,
    n_units: [usize; 2],
    n_clusters: [usize; 2],
}

impl DistTable {
    /// Builds a table from partial pmfs `arms[d][k][q]`.
    ///
    /// Masses within `-1e-12` of zero are clipped to zero; anything more
    /// negative, or an arm not summing to one within [`MASS_TOL`], is rejected.
    pub fn new(support: MediatorSupport, levels: Vec<OutcomeLevel>, arms: [Vec<Vec<f64>>; 2]) -> Result<Self> {
        let (k, q) = (support.len(), levels.len());
        if q == 0 {
            return Err(Error::Structural("a table needs at least one outcome level".into()));
        }
        let mut mass = vec![0.0; 2 * k * q];
        for (d, arm) in arms.iter().enumerate() {
            if arm.len() != k || arm.iter().any(|r| r.len() != q) {
                return Err(Error::Structural(format!("arm {d} masses do not match {k}×{q} cells")));
            }
            for (kk, row) in arm.iter().enumerate() {
                for (qq, &v) in row.iter().enumerate() {
                    if !v.is_finite() || v < -1e-12 {
                        return Err(Error::Structural(format!("arm {d} cell ({kk},{qq}) has mass {v}")));
                    }
                    mass[(d * k + kk) * q + qq] = v.max(0.0);
                }
            }
        }
        let t = DistTable { support, levels, mass, n_units: [0, 0], n_clusters: [0, 0] };
        for d in 0..2 {
            let s: f64 = t.arm(d).iter().sum();
            if (s - 1.0).abs() > MASS_TOL {
                return Err(Error::Structural(format!("arm {d} masses sum to {s}, not 1")));
            }
        }
        Ok(t)
    }

    /// Numeric point levels `0, 1, …, q-1` over an ordinal mediator.
    pub fn ordinal(arms: [Vec<Vec<f64>>; 2]) -> Result<Self> {
        let k = arms[0].len();
        let q = arms[0].first().map_or(0, |r| r.len());
        let levels = (0..q).map(|i| OutcomeLevel::Point(i as f64)).collect();
        DistTable::new(MediatorSupport::ordinal(k), levels, arms)
    }

    pub fn with_counts(mut self, n_units: [usize; 2], n_clusters: [usize; 2]) -> Self {
        self.n_units = n_units;
        self.n_clusters = n_clusters;
        self
    }

    pub fn support(&self) -> &MediatorSupport {
        &self.support
    }

    pub fn levels(&self) -> &[OutcomeLevel] {
        &self.levels
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn q(&self) -> usize {
        self.levels.len()
    }

    pub fn n_units(&self) -> [usize; 2] {
        self.n_units
    }

    pub fn n_clusters(&self) -> [usize; 2] {
        self.n_clusters
    }

    pub fn mass(&self, d: usize, k: usize, q: usize) -> f64 {
        self.mass[(d * self.k() + k) * self.q() + q]
    }

    /// All cells of arm `d`, mediator-major.
    pub fn arm(&self, d: usize) -> &[f64] {
        let kq = self.k() * self.q();
        &self.mass[d * kq..(d + 1) * kq]
    }

    /// The partial pmf `q ↦ P(Y = y_q, M = m_k | D = d)`.
    pub fn partial(&self, d: usize, k: usize) -> &[f64] {
        let q = self.q();
        let start = (d * self.k() + k) * q;
        &self.mass[start..start + q]
    }

    /// Nested copy `[d][k][q]` of the masses.
    pub fn arms(&self) -> [Vec<Vec<f64>>; 2] {
        let f = |d: usize| (0..self.k()).map(|k| self.partial(d, k).to_vec()).collect();
        [f(0), f(1)]
    }

    /// `P(M = m_k | D = d)`.
    pub fn marginal(&self, d: usize, k: usize) -> f64 {
        self.partial(d, k).iter().sum()
    }

    pub fn marginals(&self, d: usize) -> Vec<f64> {
        (0..self.k()).map(|k| self.marginal(d, k)).collect()
    }

    /// Numeric outcome values, or `None` if any level is an interval.
    pub fn numeric_levels(&self) -> Option<Vec<f64>> {
        self.levels.iter().map(|l| l.value()).collect()
    }

    /// Index of the outcome cell containing `y`.
    pub fn level_of(&self, y: f64) -> Option<usize> {
        self.levels.iter().position(|l| l.contains(y))
    }
}

/// Builds the empirical table, registering mediator and outcome values.
///
/// A scalar mediator gets a sorted, totally ordered support covering every
/// value seen in either arm; vector mediators are registered in order of
/// first appearance with the coordinatewise partial order. Outcome levels
/// are the distinct observed values, sorted.
pub fn from_records(records: &RecordSet) -> Result<DistTable> {
    let support = register_support(records)?;
    let mut ys: Vec<f64> = records.rows().iter().map(|r| r.y).collect();
    ys.sort_by(|a, b| a.total_cmp(b));
    ys.dedup();
    let levels = ys.into_iter().map(OutcomeLevel::Point).collect();
    from_records_in(records, &support, levels)
}

/// Mediator support implied by the records (see [`from_records`]).
pub fn register_support(records: &RecordSet) -> Result<MediatorSupport> {
    if records.is_empty() {
        return Err(Error::Estimation("no records".into()));
    }
    if records.mediator_dim() == 1 {
        let mut vals: Vec<f64> = records.rows().iter().map(|r| r.m[0]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup();
        MediatorSupport::new(vals.into_iter().map(|v| vec![v]).collect(), MediatorOrder::Total)
    } else {
        let mut pts: Vec<Vec<f64>> = Vec::new();
        for r in records.rows() {
            if !pts.contains(&r.m) {
                pts.push(r.m.clone());
            }
        }
        MediatorSupport::new(pts, MediatorOrder::Partial)
    }
}

/// Empirical table on a prescribed support and outcome grid.
pub fn from_records_in(records: &RecordSet, support: &MediatorSupport, levels: Vec<OutcomeLevel>) -> Result<DistTable> {
    let (k, q) = (support.len(), levels.len());
    let mut counts = [vec![vec![0.0; q]; k], vec![vec![0.0; q]; k]];
    let mut n = [0usize; 2];
    for (i, r) in records.rows().iter().enumerate() {
        let kk = support
            .index_of(&r.m)
            .ok_or_else(|| Error::Structural(format!("row {i}: mediator {:?} not in support", r.m)))?;
        let qq = levels
            .iter()
            .position(|l| l.contains(r.y))
            .ok_or_else(|| Error::Structural(format!("row {i}: outcome {} matches no level", r.y)))?;
        counts[r.d as usize][kk][qq] += 1.0;
        n[r.d as usize] += 1;
    }
    for (d, &nd) in n.iter().enumerate() {
        if nd == 0 {
            return Err(Error::Estimation(format!("arm d={d} has no rows")));
        }
    }
    for d in 0..2 {
        for row in counts[d].iter_mut() {
            for v in row.iter_mut() {
                *v /= n[d] as f64;
            }
        }
    }
    let clusters = [records.arm_clusters(0), records.arm_clusters(1)];
    Ok(DistTable::new(support.clone(), levels, counts)?.with_counts(n, clusters))
}

/// `sup_A Δ_k(A) = Σ_q (P(y_q, m_k | 1) − P(y_q, m_k | 0))₊`.
pub fn delta_sup(table: &DistTable, k: usize) -> f64 {
    table.partial(1, k).iter().zip(table.partial(0, k)).map(|(a, b)| (a - b).max(0.0)).sum()
}

/// Bins for strictly increasing cutpoints `c_1 < … < c_J`:
/// `(−∞, c_1], (c_1, c_2], …, (c_J, ∞)`.
pub fn bins_from_cutpoints(cutpoints: &[f64]) -> Result<Vec<OutcomeLevel>> {
    if cutpoints.is_empty() {
        return Err(Error::Structural("no cutpoints: the interval set is empty".into()));
    }
    if cutpoints.iter().any(|c| !c.is_finite()) || cutpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Structural("cutpoints must be finite and strictly increasing".into()));
    }
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend_from_slice(cutpoints);
    edges.push(f64::INFINITY);
    Ok(edges.windows(2).map(|w| OutcomeLevel::Bin { lower: w[0], upper: w[1] }).collect())
}

/// Collapses the outcome levels of `table` into the bins defined by `cutpoints`.
pub fn discretize_outcome(table: &DistTable, cutpoints: &[f64]) -> Result<DistTable> {
    let bins = bins_from_cutpoints(cutpoints)?;
    let mut target = Vec::with_capacity(table.q());
    for level in table.levels() {
        let idx = bins.iter().position(|b| match *level {
            OutcomeLevel::Point(v) => b.contains(v),
            OutcomeLevel::Bin { lower, upper } => match *b {
                OutcomeLevel::Bin { lower: bl, upper: bu } => lower >= bl && upper <= bu,
                OutcomeLevel::Point(_) => false,
            },
        });
        target.push(idx.ok_or_else(|| Error::Structural(format!("outcome level {level:?} straddles a cutpoint")))?);
    }
    let arms = table.arms().map(|arm| {
        arm.into_iter()
            .map(|row| {
                let mut out = vec![0.0; bins.len()];
                for (q, v) in row.into_iter().enumerate() {
                    out[target[q]] += v;
                }
                out
            })
            .collect()
    });
    Ok(DistTable::new(table.support().clone(), bins, arms)?.with_counts(table.n_units(), table.n_clusters()))
}

/// Empirical quantile cutpoints splitting `values` into `bins` groups.
///
/// Uses `F⁻¹(u) = inf{y : F(y) ≥ u}` at `u = j/bins`; with right-closed bins,
/// ties at a cutpoint fall in the lower bin. Duplicate cutpoints are merged.
pub fn quantile_cutpoints(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::Structural("need at least two outcome bins".into()));
    }
    if values.is_empty() {
        return Err(Error::Estimation("no outcome values to compute quantiles from".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let mut cuts: Vec<f64> = (1..bins)
        .map(|j| {
            let idx = ((j * n) as f64 / bins as f64).ceil() as usize;
            v[idx.max(1) - 1]
        })
        .collect();
    cuts.dedup();
    Ok(cuts)
}

/// A table over binned mediator values together with the within-bin effect
/// threshold `ν_max` used when reading its bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedTable {
    pub table: DistTable,
    pub nu_max: f64,
}

/// Merges mediator values into bins `0, 1, …`; `assignment[k]` is the bin of
/// support point `k`.
pub fn bin_mediator(table: &DistTable, assignment: &[usize], nu_max: f64) -> Result<BinnedTable> {
    if assignment.len() != table.k() {
        return Err(Error::Structural(format!(
            "assignment covers {} of {} support points",
            assignment.len(),
            table.k()
        )));
    }
    if !(0.0..=1.0).contains(&nu_max) {
        return Err(Error::Domain(format!("nu_max must lie in [0, 1], got {nu_max}")));
    }
    let nbins = assignment.iter().max().map_or(0, |m| m + 1);
    // Remember which original points share each bin so ordering is preserved.
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &b) in assignment.iter().enumerate() {
        members.entry(b).or_default().push(k);
    }
    let arms = table.arms().map(|arm| {
        let mut out = vec![vec![0.0; table.q()]; nbins];
        for (k, row) in arm.into_iter().enumerate() {
            for (q, v) in row.into_iter().enumerate() {
                out[assignment[k]][q] += v;
            }
        }
        out
    });
    let support = MediatorSupport::ordinal(nbins);
    Ok(BinnedTable {
        table: DistTable::new(support, table.levels().to_vec(), arms)?.with_counts(table.n_units(), table.n_clusters()),
        nu_max,
    })
}

#[cfg(test)]
mod tests;
