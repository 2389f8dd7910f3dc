use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// One observed unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub y: f64,
    pub m: Vec<f64>,
    pub d: u8,
    pub cluster: Option<String>,
    pub z: Option<u8>,
    pub pscore: Option<f64>,
}

impl Record {
    /// A record with only outcome, mediator and treatment.
    pub fn new(y: f64, m: Vec<f64>, d: u8) -> Self {
        Record { y: canonical(y), m: m.into_iter().map(canonical).collect(), d, cluster: None, z: None, pscore: None }
    }

    pub fn scalar(y: f64, m: f64, d: u8) -> Self {
        Record::new(y, vec![m], d)
    }

    pub fn with_cluster(mut self, c: impl Into<String>) -> Self {
        self.cluster = Some(c.into());
        self
    }

    pub fn with_z(mut self, z: u8) -> Self {
        self.z = Some(z);
        self
    }

    pub fn with_pscore(mut self, p: f64) -> Self {
        self.pscore = Some(p);
        self
    }
}

/// Maps `-0.0` to `0.0` so that equal values compare equal bitwise.
pub(crate) fn canonical(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// A validated collection of records.
///
/// All rows share the mediator dimension, and the optional cluster,
/// instrument and propensity columns are present for every row or for none.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    rows: Vec<Record>,
}

impl RecordSet {
    pub fn new(rows: Vec<Record>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let p = first.m.len();
            if p == 0 {
                return Err(Error::Structural("records need at least one mediator column".into()));
            }
            let (has_c, has_z, has_p) = (first.cluster.is_some(), first.z.is_some(), first.pscore.is_some());
            for (i, r) in rows.iter().enumerate() {
                if r.d > 1 {
                    return Err(Error::Structural(format!("row {i}: treatment must be 0 or 1, got {}", r.d)));
                }
                if r.z.is_some_and(|z| z > 1) {
                    return Err(Error::Structural(format!("row {i}: instrument must be 0 or 1")));
                }
                if r.m.len() != p {
                    return Err(Error::Structural(format!(
                        "row {i}: mediator has {} entries, expected {p}",
                        r.m.len()
                    )));
                }
                if !r.y.is_finite() || r.m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Structural(format!("row {i}: non-finite value")));
                }
                if r.cluster.is_some() != has_c || r.z.is_some() != has_z || r.pscore.is_some() != has_p {
                    return Err(Error::Structural(format!(
                        "row {i}: optional columns must be present for all rows or none"
                    )));
                }
            }
        }
        Ok(RecordSet { rows })
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mediator_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.m.len())
    }

    pub fn has_clusters(&self) -> bool {
        self.rows.first().is_some_and(|r| r.cluster.is_some())
    }

    pub fn has_instrument(&self) -> bool {
        self.rows.first().is_some_and(|r| r.z.is_some())
    }

    pub fn has_pscore(&self) -> bool {
        self.rows.first().is_some_and(|r| r.pscore.is_some())
    }

    pub fn arm_size(&self, d: u8) -> usize {
        self.rows.iter().filter(|r| r.d == d).count()
    }

    /// Distinct clusters in arm `d`, or the row count without clusters.
    pub fn arm_clusters(&self, d: u8) -> usize {
        if self.has_clusters() {
            self.rows.iter().filter(|r| r.d == d).filter_map(|r| r.cluster.as_deref()).collect::<BTreeSet<_>>().len()
        } else {
            self.arm_size(d)
        }
    }

    /// Outcomes of every row, in row order.
    pub fn outcomes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn into_rows(self) -> Vec<Record> {
        self.rows
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| Error::Structural(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    /// Parses comma-separated records with a header row.
    ///
    /// Required columns are `y` and `d`; mediators are `m1..mp` (a lone `m`
    /// is accepted as `m1`); `cluster`, `z` and `pscore` are optional.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Structural(format!("unreadable header: {e}")))?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let y_col = find("y").ok_or_else(|| Error::Structural("missing required column `y`".into()))?;
        let d_col = find("d").ok_or_else(|| Error::Structural("missing required column `d`".into()))?;
        let mut m_cols = Vec::new();
        if let Some(c) = find("m") {
            m_cols.push(c);
        } else {
            let mut i = 1;
            while let Some(c) = find(&format!("m{i}")) {
                m_cols.push(c);
                i += 1;
            }
        }
        if m_cols.is_empty() {
            return Err(Error::Structural("missing required mediator column `m1`".into()));
        }
        let (c_col, z_col, p_col) = (find("cluster"), find("z"), find("pscore"));

        let mut rows = Vec::new();
        for result in rdr.records() {
            let rec = result.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Structural(format!("line {line}: {e}"))
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |c: usize, name: &str| -> Result<&str> {
                rec.get(c).ok_or_else(|| Error::Structural(format!("line {line}: missing field `{name}`")))
            };
            let num = |c: usize, name: &str| -> Result<f64> {
                let s = field(c, name)?;
                s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Structural(format!("line {line}: column `{name}` has non-numeric value `{s}`"))
                })
            };
            let binary = |c: usize, name: &str| -> Result<u8> {
                let v = num(c, name)?;
                if v == 0.0 {
                    Ok(0)
                } else if v == 1.0 {
                    Ok(1)
                } else {
                    Err(Error::Structural(format!("line {line}: column `{name}` must be 0 or 1, got {v}")))
                }
            };
            let y = num(y_col, "y")?;
            let d = binary(d_col, "d")?;
            let m =
                m_cols.iter().enumerate().map(|(i, &c)| num(c, &format!("m{}", i + 1))).collect::<Result<Vec<_>>>()?;
            let mut r = Record::new(y, m, d);
            if let Some(c) = c_col {
                r.cluster = Some(field(c, "cluster")?.to_string());
            }
            if let Some(c) = z_col {
                r.z = Some(binary(c, "z")?);
            }
            if let Some(c) = p_col {
                r.pscore = Some(num(c, "pscore")?);
            }
            rows.push(r);
        }
        RecordSet::new(rows)
    }
}
