//! Monte Carlo harness: mixture designs that move continuously from the null
//! (`t = 0`, both arms drawn from the control pool) to the treated pool
//! (`t = 1`), rejection rates, and the per-cell cluster count diagnostic.
//!
//! Simulation `i` draws its sample from `ChaCha8Rng::seed_from_u64(seed ^ i)`
//! on stream 0; the same derived seed drives the test's bootstrap, whose
//! replicates use streams `1..=B`.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::Normal;

use crate::bounds::{nu_pooled_lower_bound, resolve_identified_set};
use crate::error::{Error, Result};
use crate::inference::{build_moment_system, run_test, BinSpec, MomentOptions, TestMethod};
use crate::probtab::{from_records_in, register_support, Record, RecordSet};
use crate::typeshares::{RestrictionKind, RestrictionSet};

/// Sample sizes of one simulated experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleDesign {
    Units {
        control: usize,
        treated: usize,
    },
    /// Whole clusters drawn with replacement, `per_arm` in each arm.
    Clusters {
        per_arm: usize,
    },
}

#[derive(Debug, Clone)]
pub struct MixtureDgp {
    control_pool: RecordSet,
    treated_pool: RecordSet,
    t: f64,
    design: SampleDesign,
    control_clusters: Vec<Vec<usize>>,
    treated_clusters: Vec<Vec<usize>>,
}

fn clusters_of(pool: &RecordSet) -> Vec<Vec<usize>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, r) in pool.rows().iter().enumerate() {
        match &r.cluster {
            Some(c) => {
                let slot = *index.entry(c.as_str()).or_insert_with(|| {
                    out.push(Vec::new());
                    out.len() - 1
                });
                out[slot].push(i);
            }
            None => out.push(vec![i]),
        }
    }
    out
}

impl MixtureDgp {
    pub fn new(control_pool: RecordSet, treated_pool: RecordSet, t: f64, design: SampleDesign) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("mixture weight t must lie in [0, 1], got {t}")));
        }
        if control_pool.is_empty() || treated_pool.is_empty() {
            return Err(Error::Structural("both pools must be nonempty".into()));
        }
        match design {
            SampleDesign::Units { control, treated } if control == 0 || treated == 0 => {
                return Err(Error::Structural("both arms need at least one unit".into()));
            }
            SampleDesign::Clusters { per_arm: 0 } => {
                return Err(Error::Structural("need at least one cluster per arm".into()));
            }
            SampleDesign::Clusters { .. } if !control_pool.has_clusters() || !treated_pool.has_clusters() => {
                return Err(Error::Structural("cluster sampling needs cluster ids in both pools".into()));
            }
            _ => {}
        }
        let control_clusters = clusters_of(&control_pool);
        let treated_clusters = clusters_of(&treated_pool);
        Ok(MixtureDgp { control_pool, treated_pool, t, design, control_clusters, treated_clusters })
    }

    /// Splits one record set into pools by treatment status.
    pub fn from_records(records: &RecordSet, t: f64, design: SampleDesign) -> Result<Self> {
        let (mut c, mut tr) = (Vec::new(), Vec::new());
        for r in records.rows() {
            if r.d == 0 {
                c.push(r.clone());
            } else {
                tr.push(r.clone());
            }
        }
        Self::new(RecordSet::new(c)?, RecordSet::new(tr)?, t, design)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn with_t(&self, t: f64) -> Result<Self> {
        Self::new(self.control_pool.clone(), self.treated_pool.clone(), t, self.design)
    }

    pub fn design(&self) -> SampleDesign {
        self.design
    }

    pub fn control_pool(&self) -> &RecordSet {
        &self.control_pool
    }

    pub fn treated_pool(&self) -> &RecordSet {
        &self.treated_pool
    }
}

/// One simulated experiment. Treated units (or clusters) come from the
/// treated pool with probability `t` and from the control pool otherwise.
pub fn draw_sample(dgp: &MixtureDgp, seed: u64) -> RecordSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Record> = Vec::new();
    match dgp.design {
        SampleDesign::Units { control, treated } => {
            for (d, n) in [(0u8, control), (1u8, treated)] {
                for _ in 0..n {
                    let pool = if d == 1 && rng.gen_bool(dgp.t) { &dgp.treated_pool } else { &dgp.control_pool };
                    let mut r = pool.rows()[rng.gen_range(0..pool.len())].clone();
                    r.d = d;
                    r.cluster = None;
                    rows.push(r);
                }
            }
        }
        SampleDesign::Clusters { per_arm } => {
            for d in 0..2u8 {
                for c in 0..per_arm {
                    let (pool, clusters) = if d == 1 && rng.gen_bool(dgp.t) {
                        (&dgp.treated_pool, &dgp.treated_clusters)
                    } else {
                        (&dgp.control_pool, &dgp.control_clusters)
                    };
                    let members = &clusters[rng.gen_range(0..clusters.len())];
                    let label = format!("d{d}c{c}");
                    for &i in members {
                        let mut r = pool.rows()[i].clone();
                        r.d = d;
                        r.cluster = Some(label.clone());
                        rows.push(r);
                    }
                }
            }
        }
    }
    RecordSet::new(rows).expect("pools hold valid rows and both arms are drawn")
}

/// Test applied to every simulated sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSpec {
    pub restriction: RestrictionKind,
    pub bins: BinSpec,
    pub method: TestMethod,
    pub alpha: f64,
    pub allow_relax: bool,
}

impl Default for TestSpec {
    fn default() -> Self {
        TestSpec {
            restriction: RestrictionKind::Monotone,
            bins: BinSpec::default(),
            method: TestMethod::LfBoot { draws: crate::inference::DEFAULT_DRAWS, seed: 0 },
            alpha: 0.05,
            allow_relax: false,
        }
    }
}

/// Per-simulation record (one CSV row of `simulate`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOutcome {
    pub sim_id: usize,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    pub nu_pooled_lb: Option<f64>,
    pub median_cell_count: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionSummary {
    /// Rejections over successful simulations.
    pub rate: f64,
    pub rejections: usize,
    pub successes: usize,
    /// Simulations where the test failed; not counted as rejections.
    pub errors: usize,
    /// Binomial standard error of `rate`.
    pub se: f64,
    pub sims: Vec<SimOutcome>,
}

fn summarize(sims: Vec<SimOutcome>) -> RejectionSummary {
    let rejections = sims.iter().filter(|s| s.reject == Some(true)).count();
    let successes = sims.iter().filter(|s| s.reject.is_some()).count();
    let errors = sims.len() - successes;
    let rate = if successes > 0 { rejections as f64 / successes as f64 } else { f64::NAN };
    let se = if successes > 0 { (rate * (1.0 - rate) / successes as f64).sqrt() } else { f64::NAN };
    if errors > 0 {
        log::warn!("{errors} of {} simulations failed and are excluded from the rejection rate", sims.len());
    }
    RejectionSummary { rate, rejections, successes, errors, se, sims }
}

fn sim_seed(seed: u64, i: usize) -> u64 {
    seed ^ i as u64
}

/// Rejection rate of an arbitrary decision rule `test(sample, seed)`.
pub fn rejection_rate_with<F>(dgp: &MixtureDgp, nsims: usize, seed: u64, test: F) -> Result<RejectionSummary>
where
    F: Fn(&RecordSet, u64) -> Result<bool> + Sync,
{
    if nsims == 0 {
        return Err(Error::Precondition("need at least one simulation".into()));
    }
    let sims = (0..nsims)
        .into_par_iter()
        .map(|i| {
            let s = sim_seed(seed, i);
            let sample = draw_sample(dgp, s);
            match test(&sample, s) {
                Ok(reject) => SimOutcome {
                    sim_id: i,
                    statistic: None,
                    p_value: None,
                    reject: Some(reject),
                    nu_pooled_lb: None,
                    median_cell_count: None,
                    error: None,
                },
                Err(e) => SimOutcome {
                    sim_id: i,
                    statistic: None,
                    p_value: None,
                    reject: None,
                    nu_pooled_lb: None,
                    median_cell_count: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(summarize(sims))
}

fn one_simulation(sample: &RecordSet, spec: &TestSpec, s: u64) -> Result<(f64, f64, bool, Option<f64>)> {
    let support = register_support(sample)?;
    let r = RestrictionSet::realize(spec.restriction.clone(), &support)?;
    let opts =
        MomentOptions { bins: spec.bins.clone(), allow_relax: spec.allow_relax, seed: s, ..MomentOptions::default() };
    let system = build_moment_system(sample, &r, &opts)?;
    let method = match spec.method {
        TestMethod::LfBoot { draws, .. } => TestMethod::LfBoot { draws, seed: s },
        m => m,
    };
    let res = run_test(&system, method, spec.alpha)?;
    let table = from_records_in(sample, &support, spec.bins.levels(sample)?)?;
    let pooled = resolve_identified_set(&table, &r, true)
        .and_then(|(spec, _)| nu_pooled_lower_bound(&table, spec.restriction()))
        .ok()
        .filter(|p| !p.degenerate)
        .map(|p| p.value);
    Ok((res.statistic, res.p_value, res.reject, pooled))
}

/// Fraction of `nsims` simulated samples on which the test rejects.
pub fn rejection_rate(dgp: &MixtureDgp, spec: &TestSpec, nsims: usize, seed: u64) -> Result<RejectionSummary> {
    if nsims == 0 {
        return Err(Error::Precondition("need at least one simulation".into()));
    }
    let sims = (0..nsims)
        .into_par_iter()
        .map(|i| {
            let s = sim_seed(seed, i);
            let sample = draw_sample(dgp, s);
            let cells = median_cell_count(&sample, &spec.bins).ok();
            match one_simulation(&sample, spec, s) {
                Ok((stat, p, reject, pooled)) => SimOutcome {
                    sim_id: i,
                    statistic: Some(stat),
                    p_value: Some(p),
                    reject: Some(reject),
                    nu_pooled_lb: pooled,
                    median_cell_count: cells,
                    error: None,
                },
                Err(e) => SimOutcome {
                    sim_id: i,
                    statistic: None,
                    p_value: None,
                    reject: None,
                    nu_pooled_lb: None,
                    median_cell_count: cells,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(summarize(sims))
}

/// Median over nonempty `(D, M, Y-bin)` cells of the number of distinct
/// clusters (rows when unclustered) observed in the cell.
pub fn median_cell_count(records: &RecordSet, bins: &BinSpec) -> Result<f64> {
    let support = register_support(records)?;
    let levels = bins.levels(records)?;
    let mut cells: HashMap<(u8, usize, usize), HashSet<String>> = HashMap::new();
    for (i, r) in records.rows().iter().enumerate() {
        let k = support.index_of(&r.m).expect("registered support");
        let q = levels
            .iter()
            .position(|l| l.contains(r.y))
            .ok_or_else(|| Error::Structural(format!("row {i}: outcome {} outside the bins", r.y)))?;
        let unit = r.cluster.clone().unwrap_or_else(|| format!("#{i}"));
        cells.entry((r.d, k, q)).or_default().insert(unit);
    }
    let mut counts: Vec<usize> = cells.values().map(|s| s.len()).collect();
    counts.sort_unstable();
    let n = counts.len();
    Ok(if n % 2 == 1 { counts[n / 2] as f64 } else { 0.5 * (counts[n / 2 - 1] + counts[n / 2]) as f64 })
}

/// Synthetic pool pairs shipped in place of application data.
pub mod pools {
    use super::*;

    fn bern(rng: &mut ChaCha8Rng, p: f64) -> f64 {
        f64::from(u8::from(rng.gen_bool(p.clamp(0.0, 1.0))))
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(Normal::new(0.0, 1.0).expect("unit normal"))
    }

    fn set(rows: Vec<Record>) -> RecordSet {
        RecordSet::new(rows).expect("generated rows are valid")
    }

    /// Binary mediator and binary outcome. Under the treated pool 20% of
    /// units are mediator compliers and never-takers' outcome rises from
    /// 0.3 to 0.5, a direct effect.
    pub fn binary(seed: u64, n: usize) -> (RecordSet, RecordSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut control = Vec::with_capacity(n);
        let mut treated = Vec::with_capacity(n);
        for _ in 0..n {
            let m = bern(&mut rng, 0.4);
            control.push(Record::scalar(bern(&mut rng, 0.3 + 0.3 * m), m, 0));
            let m = bern(&mut rng, 0.6);
            treated.push(Record::scalar(bern(&mut rng, if m == 1.0 { 0.6 } else { 0.5 }), m, 1));
        }
        (set(control), set(treated))
    }

    /// Binary mediator and continuous outcome `Y = M + ε`. The treated pool
    /// shifts never-takers' outcomes up by one half.
    pub fn continuous(seed: u64, n: usize) -> (RecordSet, RecordSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut control = Vec::with_capacity(n);
        let mut treated = Vec::with_capacity(n);
        for _ in 0..n {
            let m = bern(&mut rng, 0.4);
            control.push(Record::scalar(m + normal(&mut rng), m, 0));
            let m = bern(&mut rng, 0.6);
            let shift = if m == 0.0 { 0.5 } else { 0.0 };
            treated.push(Record::scalar(m + shift + normal(&mut rng), m, 1));
        }
        (set(control), set(treated))
    }

    /// Binary mediator, continuous outcome, `clusters` clusters of about
    /// `size` units per pool with cluster-level shocks to both `M` and `Y`.
    pub fn clustered(seed: u64, clusters: usize, size: usize) -> (RecordSet, RecordSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |d: u8, rng: &mut ChaCha8Rng| {
            let mut rows = Vec::new();
            for c in 0..clusters {
                let u = 0.3 * normal(rng);
                let v = 0.1 * normal(rng);
                let n_c = rng.gen_range(size.saturating_sub(size / 3).max(1)..=size + size / 3);
                for _ in 0..n_c {
                    let base = if d == 1 { 0.55 } else { 0.4 };
                    let m = bern(rng, base + v);
                    let direct = if d == 1 && m == 0.0 { 0.5 } else { 0.0 };
                    let y = m + u + direct + normal(rng);
                    rows.push(Record::scalar(y, m, d).with_cluster(format!("p{d}-{c}")));
                }
            }
            set(rows)
        };
        let control = make(0, &mut rng);
        let treated = make(1, &mut rng);
        (control, treated)
    }

    /// Five ordered mediator values. Treatment raises `M` by one step for
    /// half the units; in the treated pool units at the top value also get
    /// a direct effect on `Y`.
    pub fn ordered(seed: u64, n: usize) -> (RecordSet, RecordSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut control = Vec::with_capacity(n);
        let mut treated = Vec::with_capacity(n);
        let m0_law = [0.3, 0.25, 0.2, 0.15, 0.1];
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut m0 = 4.0;
            for (k, p) in m0_law.iter().enumerate() {
                acc += p;
                if u < acc {
                    m0 = k as f64;
                    break;
                }
            }
            let m1 = (m0 + bern(&mut rng, 0.5)).min(4.0);
            let e = normal(&mut rng);
            control.push(Record::scalar(0.5 * m0 + e, m0, 0));
            let direct = if m1 == 4.0 && m0 == 4.0 { 1.0 } else { 0.0 };
            treated.push(Record::scalar(0.5 * m1 + direct + e, m1, 1));
        }
        (set(control), set(treated))
    }

    /// Power design with exact pool proportions: binary mediator and a
    /// five-point outcome. At `t = 1` the pooled lower bound on the share of
    /// always- and never-takers with a direct effect is exactly 0.25; at
    /// `t = 0` both arms share the control law.
    pub fn power() -> (RecordSet, RecordSet) {
        // Counts per (m, y) out of 3000 units.
        let control: [[usize; 5]; 2] = [[360; 5], [240; 5]];
        let treated: [[usize; 5]; 2] = [[0, 0, 180, 510, 510], [140, 140, 140, 690, 690]];
        let build = |counts: &[[usize; 5]; 2], d: u8| {
            let mut rows = Vec::with_capacity(3000);
            for (m, row) in counts.iter().enumerate() {
                for (y, &n) in row.iter().enumerate() {
                    rows.extend((0..n).map(|_| Record::scalar(y as f64, m as f64, d)));
                }
            }
            set(rows)
        };
        (build(&control, 0), build(&treated, 1))
    }
}
