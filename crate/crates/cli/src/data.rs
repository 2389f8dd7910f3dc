//! Input loading: column renaming, hashing, strategy and restriction parsing.

use std::fs;
use std::path::Path;

use mechtest_core::ident::{Strategy, MAX_CLIPPED_MASS};
use mechtest_core::inference::BinSpec;
use mechtest_core::probtab::{register_support, DistTable, MediatorSupport, OutcomeLevel, RecordSet};
use mechtest_core::typeshares::{RestrictionKind, RestrictionSet};
use mechtest_core::Error;
use sha2::{Digest, Sha256};

use crate::args::DataArgs;
use crate::output::{io_err, CliError, InputInfo};

fn structural(msg: String) -> CliError {
    CliError::Core(Error::Structural(msg))
}

fn is_mediator_name(h: &str) -> bool {
    h == "m" || h.strip_prefix('m').is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

/// Rewrites the header so user-named columns carry the names the record
/// parser expects. Columns that would collide are renamed out of the way.
fn rename_header(header: &[String], args: &DataArgs) -> Result<Vec<String>, CliError> {
    let mut maps: Vec<(String, String, &str)> =
        vec![("y".into(), args.y_col.clone(), "--y-col"), ("d".into(), args.d_col.clone(), "--d-col")];
    for (i, m) in args.m_cols.iter().enumerate() {
        maps.push((format!("m{}", i + 1), m.clone(), "--m-cols"));
    }
    for (canon, given, flag) in [
        ("cluster", &args.cluster_col, "--cluster-col"),
        ("z", &args.z_col, "--z-col"),
        ("pscore", &args.pscore_col, "--pscore-col"),
    ] {
        if let Some(g) = given {
            maps.push((canon.into(), g.clone(), flag));
        }
    }
    let mut out = header.to_vec();
    let mut sources = Vec::new();
    for (canon, given, flag) in &maps {
        let idx = header
            .iter()
            .position(|h| h == given)
            .ok_or_else(|| structural(format!("missing column `{given}` (named by {flag})")))?;
        sources.push((idx, canon.clone()));
    }
    let targets: Vec<&str> = maps.iter().map(|(c, _, _)| c.as_str()).collect();
    for (i, h) in header.iter().enumerate() {
        let mapped = sources.iter().any(|(s, _)| *s == i);
        let clashes = targets.contains(&h.as_str()) || (!args.m_cols.is_empty() && is_mediator_name(h));
        if !mapped && clashes {
            out[i] = format!("_orig_{h}");
        }
    }
    for (idx, canon) in sources {
        out[idx] = canon;
    }
    Ok(out)
}

pub fn load_records(args: &DataArgs) -> Result<(RecordSet, InputInfo), CliError> {
    load_records_from(&args.input, Some(args))
}

pub fn load_records_from(path: &Path, args: Option<&DataArgs>) -> Result<(RecordSet, InputInfo), CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let sha256 = format!("{:x}", Sha256::digest(&bytes));
    let split = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let mut header_reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(&bytes[..split]);
    let header: Vec<String> = match header_reader.records().next() {
        Some(Ok(r)) => r.iter().map(str::to_string).collect(),
        _ => return Err(structural(format!("{}: missing header row", path.display()))),
    };
    let header = match args {
        Some(a) => rename_header(&header, a)?,
        None => header,
    };
    let mut text = {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).expect("in-memory write");
        w.into_inner().expect("in-memory flush")
    };
    // The writer ends the header with its own newline.
    text.extend_from_slice(bytes.get(split + 1..).unwrap_or(&[]));
    let records = RecordSet::from_csv_reader(text.as_slice())?;
    if records.is_empty() {
        return Err(CliError::Core(Error::Estimation(format!("{}: no data rows", path.display()))));
    }
    let info = InputInfo { path: path.display().to_string(), sha256, bytes: bytes.len(), rows: records.len() };
    Ok((records, info))
}

fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>, CliError> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| structural(format!("bad matrix entry `{v}`"))))
                .collect()
        })
        .collect()
}

pub fn strategy(args: &DataArgs) -> Result<Strategy, CliError> {
    match args.strategy.as_str() {
        "randomized" => Ok(Strategy::Randomized),
        "iv" => Ok(Strategy::Iv),
        "ipw" => Ok(Strategy::Ipw { overlap: args.overlap }),
        "me" | "measurement_error" => {
            let m = args.me_matrix.as_deref().ok_or_else(|| structural("strategy `me` needs --me-matrix".into()))?;
            Ok(Strategy::MeasurementError { l: parse_matrix(m)? })
        }
        other => Err(structural(format!("unknown strategy `{other}` (expected randomized, iv, ipw or me)"))),
    }
}

/// Reads a polyhedron file: one row of `B` per line followed by its `c`.
fn custom_polyhedron(path: &str) -> Result<RestrictionKind, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e))?;
    let (mut b, mut c) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().map(str::trim).enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut vals = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| structural(format!("{path} line {}: bad number `{v}`", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rhs = vals.pop().ok_or_else(|| structural(format!("{path} line {}: empty row", i + 1)))?;
        b.push(vals);
        c.push(rhs);
    }
    Ok(RestrictionKind::CustomPolyhedron { b, c })
}

pub fn restriction_kind(spec: &str) -> Result<RestrictionKind, CliError> {
    match spec.strip_prefix("custom:") {
        Some(path) => custom_polyhedron(path),
        None => Ok(RestrictionKind::parse(spec)?),
    }
}

pub fn restriction(spec: &str, support: &MediatorSupport) -> Result<RestrictionSet, CliError> {
    Ok(RestrictionSet::realize(restriction_kind(spec)?, support)?)
}

/// Arm-wise table under the chosen strategy on the chosen outcome grid.
pub fn estimate_table(records: &RecordSet, strategy: &Strategy, bins: &BinSpec) -> Result<DistTable, CliError> {
    let support = register_support(records)?;
    let levels = bins.levels(records)?;
    Ok(strategy.estimate_in(records, &support, &levels, Some(MAX_CLIPPED_MASS))?)
}

pub fn level_label(level: &OutcomeLevel) -> String {
    match *level {
        OutcomeLevel::Point(v) => format!("{v}"),
        OutcomeLevel::Bin { lower, upper } => format!("({lower},{upper}]"),
    }
}

pub fn point_label(m: &[f64]) -> String {
    m.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        data: DataArgs,
    }

    fn args(extra: &[&str]) -> DataArgs {
        let mut v = vec!["x", "--input", "in.csv"];
        v.extend_from_slice(extra);
        Wrap::parse_from(v).data
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn default_names_pass_through() {
        let h = strings(&["y", "m", "d"]);
        assert_eq!(rename_header(&h, &args(&[])).unwrap(), h);
    }

    #[test]
    fn named_columns_are_mapped_and_clashes_moved() {
        let h = strings(&["outcome", "y", "treat", "med", "m1"]);
        let a = args(&["--y-col", "outcome", "--d-col", "treat", "--m-cols", "med"]);
        assert_eq!(rename_header(&h, &a).unwrap(), strings(&["y", "_orig_y", "d", "m1", "_orig_m1"]));
    }

    #[test]
    fn missing_named_column_is_reported() {
        let h = strings(&["y", "m", "d"]);
        let err = rename_header(&h, &args(&["--y-col", "earnings"])).unwrap_err();
        assert!(format!("{}", err.to_json()).contains("earnings"));
    }

    #[test]
    fn matrix_rows_split_on_semicolons() {
        assert_eq!(parse_matrix("0.9,0.2; 0.1,0.8").unwrap(), vec![vec![0.9, 0.2], vec![0.1, 0.8]]);
    }
}
