//! Explicit potential-outcome distributions attaining the bounds.
//!
//! Given a table and a share vector `θ` matching its mediator marginals,
//! [`construct_sharp_distribution`] builds a distribution over types and
//! potential outcomes that reproduces the observed `(Y, M) | D` laws, in which
//! `k`-always-takers disagree across treatments with probability exactly
//! `η_k / θ_kk`, and in which no other (type, mediator value) pair has a
//! direct effect. [`verify_consistency`] recomputes the observables and the
//! disagreement probabilities so the construction can be checked end to end.

use serde::Serialize;

use crate::bounds::eta_at;
use crate::error::{Error, Result};
use crate::probtab::DistTable;
use crate::typeshares::theta_index;

/// Values at or below this are treated as zero mass.
const ZERO: f64 = 1e-12;

/// Joint pmf of a pair `(Y, Y′)` on a common grid, row-major in `Y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coupling {
    q: usize,
    pmf: Vec<f64>,
}

impl Coupling {
    /// Both coordinates equal, distributed as `f`.
    pub fn diagonal(f: &[f64]) -> Self {
        let q = f.len();
        let mut pmf = vec![0.0; q * q];
        for (i, &v) in f.iter().enumerate() {
            pmf[i * q + i] = v;
        }
        Coupling { q, pmf }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn get(&self, y: usize, y_prime: usize) -> f64 {
        self.pmf[y * self.q + y_prime]
    }

    pub fn first_marginal(&self) -> Vec<f64> {
        (0..self.q).map(|i| self.pmf[i * self.q..(i + 1) * self.q].iter().sum()).collect()
    }

    pub fn second_marginal(&self) -> Vec<f64> {
        (0..self.q).map(|j| (0..self.q).map(|i| self.pmf[i * self.q + j]).sum()).collect()
    }

    /// `P(Y ≠ Y′)`.
    pub fn disagreement(&self) -> f64 {
        let total: f64 = self.pmf.iter().sum();
        let diag: f64 = (0..self.q).map(|i| self.pmf[i * self.q + i]).sum();
        total - diag
    }
}

/// Total variation distance `Σ (f − g)₊` together with a coupling of `f` and
/// `g` whose disagreement probability equals it.
///
/// Matching mass stays on the diagonal; the excess of `f` is spread over the
/// excess of `g` proportionally.
pub fn tv_distance(f: &[f64], g: &[f64]) -> Result<(f64, Coupling)> {
    if f.len() != g.len() || f.is_empty() {
        return Err(Error::Structural(format!("pmfs on grids of size {} and {}", f.len(), g.len())));
    }
    let (sf, sg): (f64, f64) = (f.iter().sum(), g.iter().sum());
    if f.iter().chain(g).any(|v| !(*v >= -ZERO)) || (sf - 1.0).abs() > 1e-9 || (sg - 1.0).abs() > 1e-9 {
        return Err(Error::Structural("tv_distance needs two proper pmfs".into()));
    }
    let q = f.len();
    let plus: Vec<f64> = f.iter().zip(g).map(|(a, b)| (a - b).max(0.0)).collect();
    let minus: Vec<f64> = f.iter().zip(g).map(|(a, b)| (b - a).max(0.0)).collect();
    let tv: f64 = plus.iter().sum();
    let mut c = Coupling::diagonal(&f.iter().zip(g).map(|(a, b)| a.min(*b).max(0.0)).collect::<Vec<_>>());
    if tv > 0.0 {
        for i in 0..q {
            for j in 0..q {
                c.pmf[i * q + j] += plus[i] * minus[j] / tv;
            }
        }
    }
    Ok((tv, c))
}

/// Which branch of the construction was used for a mediator value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpCase {
    /// No always-takers at `k`.
    NoAlwaysTakers,
    /// Unexplained excess with disjoint arm supports at `k`.
    DisjointSupports,
    /// Unexplained excess with overlapping arm supports at `k`.
    Mixture,
    /// No unexplained excess: always-takers sit on the overlap.
    NoExcess,
}

/// A distribution over types `G = lk` and potential outcomes `Y(d, m)`.
///
/// Given the type, the pairs `(Y(1,m), Y(0,m))` are independent across `m`;
/// `joint(l, k, m)` is the law of that pair for type `lk`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimitiveDistribution {
    k: usize,
    q: usize,
    theta: Vec<f64>,
    joints: Vec<Vec<Coupling>>,
    cases: Vec<SharpCase>,
}

impl PrimitiveDistribution {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn cases(&self) -> &[SharpCase] {
        &self.cases
    }

    /// Law of `(Y(1, m), Y(0, m))` given `G = lk`.
    pub fn joint(&self, l: usize, k: usize, m: usize) -> &Coupling {
        &self.joints[theta_index(self.k, l, k)][m]
    }

    /// `P(Y(1, m_k) ≠ Y(0, m_k) | G = kk)`.
    pub fn always_taker_disagreement(&self, k: usize) -> f64 {
        self.joint(k, k, k).disagreement()
    }

    /// Implied `P(Y = y_q, M = m_k | D = d)` as nested `[d][k][q]` arrays.
    pub fn observables(&self) -> [Vec<Vec<f64>>; 2] {
        let (k, q) = (self.k, self.q);
        let mut arms = [vec![vec![0.0; q]; k], vec![vec![0.0; q]; k]];
        for l in 0..k {
            for m in 0..k {
                let w = self.theta[theta_index(k, l, m)];
                if w == 0.0 {
                    continue;
                }
                // Treated units of type lm are observed at M = m with Y(1, m).
                let treated = self.joint(l, m, m).first_marginal();
                // Control units of type lm are observed at M = l with Y(0, l).
                let control = self.joint(l, m, l).second_marginal();
                for y in 0..q {
                    arms[1][m][y] += w * treated[y];
                    arms[0][l][y] += w * control[y];
                }
            }
        }
        arms
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| (x / s).max(0.0)).collect()
}

fn degenerate(q: usize) -> Vec<f64> {
    let mut v = vec![0.0; q];
    v[0] = 1.0;
    v
}

/// Conditional pmf `f / Σf`, or a point mass when `f` carries no mass.
fn conditional(f: &[f64]) -> Vec<f64> {
    if f.iter().sum::<f64>() > ZERO {
        normalized(f)
    } else {
        degenerate(f.len())
    }
}

fn check_shares(table: &DistTable, theta: &[f64]) -> Result<()> {
    let k = table.k();
    if theta.len() != k * k {
        return Err(Error::Precondition(format!("expected {} type shares, got {}", k * k, theta.len())));
    }
    if let Some(i) = theta.iter().position(|&v| !(v >= -ZERO)) {
        return Err(Error::Precondition(format!("type share θ_{}{} = {} is negative", i / k, i % k, theta[i])));
    }
    for m in 0..k {
        let row: f64 = (0..k).map(|l| theta[theta_index(k, m, l)]).sum();
        if (row - table.marginal(0, m)).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "shares leaving m_{m} sum to {row}, but P(M = m_{m} | D = 0) = {}",
                table.marginal(0, m)
            )));
        }
        let col: f64 = (0..k).map(|l| theta[theta_index(k, l, m)]).sum();
        if (col - table.marginal(1, m)).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "shares arriving at m_{m} sum to {col}, but P(M = m_{m} | D = 1) = {}",
                table.marginal(1, m)
            )));
        }
    }
    Ok(())
}

/// Builds a distribution consistent with `table` that attains the
/// always-taker disagreement `η_k / θ_kk` at every `k` for the shares `theta`.
pub fn construct_sharp_distribution(table: &DistTable, theta: &[f64]) -> Result<PrimitiveDistribution> {
    check_shares(table, theta)?;
    let (k, q) = (table.k(), table.q());
    let theta: Vec<f64> = theta.iter().map(|v| v.max(0.0)).collect();
    let eta = eta_at(table, &theta);
    let point = Coupling::diagonal(&degenerate(q));
    let mut joints = vec![vec![point; k]; k * k];
    let mut cases = Vec::with_capacity(k);

    for m in 0..k {
        let f1 = table.partial(1, m);
        let f0 = table.partial(0, m);
        let tkk = theta[theta_index(k, m, m)];
        let inflow: f64 = (0..k).filter(|&l| l != m).map(|l| theta[theta_index(k, l, m)]).sum();
        let outflow: f64 = (0..k).filter(|&l| l != m).map(|l| theta[theta_index(k, m, l)]).sum();
        let fmin: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a.min(*b)).collect();
        let fmin_mass: f64 = fmin.iter().sum();
        let f1_excess: Vec<f64> = f1.iter().zip(&fmin).map(|(a, b)| a - b).collect();
        let f0_excess: Vec<f64> = f0.iter().zip(&fmin).map(|(a, b)| a - b).collect();
        let excess_mass = [f0_excess.iter().sum::<f64>(), f1_excess.iter().sum::<f64>()];
        let eta_k = if eta[m] <= ZERO { 0.0 } else { eta[m] };

        // Marginals of Y(1, m) for arrivals lm, Y(0, m) for departures ml,
        // and both for the always-takers mm.
        let (arrive, depart, at1, at0, case);
        if tkk <= ZERO {
            arrive = conditional(f1);
            depart = conditional(f0);
            at1 = arrive.clone();
            at0 = depart.clone();
            case = SharpCase::NoAlwaysTakers;
        } else if eta_k > 0.0 && fmin_mass <= ZERO {
            arrive = conditional(f1);
            depart = conditional(f0);
            at1 = arrive.clone();
            at0 = depart.clone();
            case = SharpCase::DisjointSupports;
        } else if eta_k > 0.0 && excess_mass[0] > ZERO && excess_mass[1] > ZERO {
            let nu = (eta_k / tkk).min(1.0);
            let fmin_n = normalized(&fmin);
            let f1_n = normalized(&f1_excess);
            let f0_n = normalized(&f0_excess);
            at1 = fmin_n.iter().zip(&f1_n).map(|(a, b)| (1.0 - nu) * a + nu * b).collect();
            at0 = fmin_n.iter().zip(&f0_n).map(|(a, b)| (1.0 - nu) * a + nu * b).collect();
            arrive = f1_n;
            depart = f0_n;
            case = SharpCase::Mixture;
        } else {
            // No unexplained excess (or a vanishing arm excess that leaves
            // nothing to mix): always-takers sit on the overlap.
            let fmin_n = normalized(&fmin);
            let rest = |f: &[f64], mass: f64| -> Vec<f64> {
                if mass <= ZERO {
                    return degenerate(q);
                }
                let v: Vec<f64> = f.iter().zip(&fmin_n).map(|(a, b)| (a - tkk * b).max(0.0)).collect();
                conditional(&v)
            };
            arrive = rest(f1, inflow);
            depart = rest(f0, outflow);
            at1 = fmin_n.clone();
            at0 = fmin_n;
            case = SharpCase::NoExcess;
        }
        cases.push(case);

        for l in (0..k).filter(|&l| l != m) {
            joints[theta_index(k, l, m)][m] = Coupling::diagonal(&arrive);
            joints[theta_index(k, m, l)][m] = Coupling::diagonal(&depart);
        }
        joints[theta_index(k, m, m)][m] =
            if at1 == at0 { Coupling::diagonal(&at1) } else { tv_distance(&at1, &at0)?.1 };
    }
    Ok(PrimitiveDistribution { k, q, theta, joints, cases })
}

/// Comparison of a primitive distribution against a table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// Largest absolute cell difference between implied and observed laws.
    pub max_deviation: f64,
    /// Largest cell difference per `[d][k]`.
    pub deviation: [Vec<f64>; 2],
    /// `P(Y(1,m_k) ≠ Y(0,m_k) | G = kk)` per `k`.
    pub disagreement: Vec<f64>,
    /// `η_k / θ_kk` at the distribution's shares (`None` when `θ_kk = 0`).
    pub target_disagreement: Vec<Option<f64>>,
    /// Largest `|disagreement − target|` over `k` with `θ_kk > 0`.
    pub disagreement_gap: f64,
    /// Whether every pair other than `(G = kk, m = m_k)` has `Y(1,m) = Y(0,m)`.
    pub others_have_no_direct_effect: bool,
}

/// Recomputes the observable laws and disagreement probabilities of `p`.
pub fn verify_consistency(p: &PrimitiveDistribution, table: &DistTable) -> ConsistencyReport {
    let (k, q) = (p.k(), p.q());
    let implied = p.observables();
    let mut deviation = [vec![f64::INFINITY; k], vec![f64::INFINITY; k]];
    let comparable = table.k() == k && table.q() == q;
    if comparable {
        for d in 0..2 {
            for m in 0..k {
                deviation[d][m] = (0..q).map(|y| (implied[d][m][y] - table.mass(d, m, y)).abs()).fold(0.0, f64::max);
            }
        }
    }
    let max_deviation = deviation.iter().flatten().copied().fold(0.0, f64::max);
    let disagreement: Vec<f64> = (0..k).map(|m| p.always_taker_disagreement(m)).collect();
    let eta = if comparable { eta_at(table, p.theta()) } else { vec![f64::NAN; k] };
    let target: Vec<Option<f64>> = (0..k)
        .map(|m| {
            let t = p.theta()[theta_index(k, m, m)];
            (t > ZERO).then(|| eta[m] / t)
        })
        .collect();
    let disagreement_gap = (0..k).filter_map(|m| target[m].map(|t| (t - disagreement[m]).abs())).fold(0.0, f64::max);
    let mut others = true;
    for l in 0..k {
        for kk in 0..k {
            for m in 0..k {
                if l == kk && kk == m {
                    continue;
                }
                if p.joint(l, kk, m).disagreement() > ZERO {
                    others = false;
                }
            }
        }
    }
    ConsistencyReport {
        max_deviation,
        deviation,
        disagreement,
        target_disagreement: target,
        disagreement_gap,
        others_have_no_direct_effect: others,
    }
}

#[cfg(test)]
mod tests;
