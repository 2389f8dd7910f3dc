use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use mechtest_core::bounds::{
    ade_bounds, breakdown_defier_budget, compute_bounds, nu_pooled_lower_bound, resolve_identified_set, BoundsOptions,
};
use mechtest_core::ident::{Strategy, ZJoint};
use mechtest_core::inference::{
    build_moment_system, default_alpha_grid, p_value_curve, run_test, BinSpec, MomentOptions, TestMethod,
};
use mechtest_core::mc::{self, pools, MixtureDgp, SampleDesign, TestSpec};
use mechtest_core::probtab::{register_support, DistTable, MediatorOrder, RecordSet};
use mechtest_core::typeshares::{build_identified_set, minimal_defier_budget, RestrictionKind, RestrictionSet};
use mechtest_core::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::data::{self, level_label, point_label};
use crate::output::{csv_writer, emit_json, finish_csv, io_err, manifest_path, sibling, CliError, Manifest};

pub fn run(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::Bounds(a) => bounds(&a, argv),
        Command::Test(a) => test(&a, argv),
        Command::Robustness(a) => robustness(&a, argv),
        Command::Ade(a) => ade(&a, argv),
        Command::Simulate(a) => simulate(&a, argv),
        Command::Diagnose(a) => diagnose(&a, argv),
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Adds the fields of `extra` to the object `base`.
fn merged(base: impl Serialize, extra: Value) -> Value {
    let mut v = serde_json::to_value(base).expect("outputs serialize");
    if let (Value::Object(b), Value::Object(e)) = (&mut v, extra) {
        b.extend(e);
    }
    v
}

fn table_summary(table: &DistTable) -> Value {
    json!({
        "support": table.support().points().iter().map(|m| point_label(m)).collect::<Vec<_>>(),
        "levels": table.levels().iter().map(level_label).collect::<Vec<_>>(),
        "p0": table.marginals(0),
        "p1": table.marginals(1),
    })
}

fn write_plot(table: &DistTable, path: &Path) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let row = |w: &mut csv::Writer<_>, rec: Vec<String>| w.write_record(rec).map_err(|e| io_err(path, e));
    row(&mut w, ["k", "m", "y", "p_control", "p_treated", "delta"].map(String::from).to_vec())?;
    for k in 0..table.k() {
        for (q, level) in table.levels().iter().enumerate() {
            let (p0, p1) = (table.mass(0, k, q), table.mass(1, k, q));
            row(
                &mut w,
                vec![
                    k.to_string(),
                    point_label(&table.support().points()[k]),
                    level_label(level),
                    p0.to_string(),
                    p1.to_string(),
                    (p1 - p0).to_string(),
                ],
            )?;
        }
    }
    finish_csv(w, path)
}

fn bounds(a: &BoundsArgs, argv: &[String]) -> Result<(), CliError> {
    let (records, info) = data::load_records(&a.data)?;
    let strategy = data::strategy(&a.data)?;
    let bins = BinSpec::parse(&a.bins)?;
    let table = data::estimate_table(&records, &strategy, &bins)?;
    let r = data::restriction(&a.data.restriction, table.support())?;
    let opts = BoundsOptions { auto_relax: a.data.auto_relax, ade: !a.no_ade, nu_max: a.nu_max };
    let report = compute_bounds(&table, &r, &opts)?;
    let breakdown = if a.breakdown { Some(breakdown_defier_budget(&table)?) } else { None };

    let plot = a.plot.clone().unwrap_or_else(|| match &a.output.out {
        Some(o) => sibling(o, ".plot.csv"),
        None => PathBuf::from("mechtest-plot.csv"),
    });
    write_plot(&table, &plot)?;

    let mut extra = json!({
        "strategy": strategy.label(),
        "n_rows": records.len(),
        "breakdown": breakdown,
        "plot": path_string(&plot),
    });
    extra.as_object_mut().unwrap().extend(table_summary(&table).as_object().unwrap().clone());
    emit_json(&merged(&report, extra), a.output.out.as_deref())?;

    let mut m = Manifest::new("bounds", argv, a);
    m.input = Some(&info);
    m.outputs = a.output.out.iter().map(|p| path_string(p)).chain([path_string(&plot)]).collect();
    m.write(&manifest_path(a.output.manifest.as_ref(), a.output.out.as_ref()))
}

fn test(a: &TestArgs, argv: &[String]) -> Result<(), CliError> {
    let (records, info) = data::load_records(&a.data)?;
    let strategy = data::strategy(&a.data)?;
    let bins = BinSpec::parse(&a.bins)?;
    let support = register_support(&records)?;
    let r = data::restriction(&a.data.restriction, &support)?;
    let method = TestMethod::parse(&a.method, a.draws, a.seed)?;
    let opts = MomentOptions {
        bins: bins.clone(),
        nu_ub: (!a.nu_ub.is_empty()).then(|| a.nu_ub.clone()),
        strategy: strategy.clone(),
        allow_relax: a.data.auto_relax,
        cell_floor: a.cell_floor,
        cov_draws: a.cov_draws,
        seed: a.seed,
        force_general: a.force_general,
    };
    let system = build_moment_system(&records, &r, &opts)?;
    let result = run_test(&system, method, a.alpha)?;
    let curve = if a.p_curve { Some(p_value_curve(&system, method, &default_alpha_grid())?) } else { None };
    let extra = json!({
        "strategy": strategy.label(),
        "bins": bins,
        "n_rows": records.len(),
        "p_value_curve": curve,
    });
    emit_json(&merged(&result, extra), a.output.out.as_deref())?;

    let mut m = Manifest::new("test", argv, a);
    m.seed = Some(a.seed);
    m.input = Some(&info);
    m.outputs = a.output.out.iter().map(|p| path_string(p)).collect();
    m.write(&manifest_path(a.output.manifest.as_ref(), a.output.out.as_ref()))
}

fn budget_kind(table: &DistTable, dbar: f64) -> RestrictionKind {
    match table.support().order() {
        MediatorOrder::Total => RestrictionKind::DefierBudget { dbar },
        _ => RestrictionKind::ElementwiseDefierBudget { dbar },
    }
}

#[derive(Serialize)]
struct GridPoint {
    dbar: f64,
    feasible: bool,
    nu_pooled_lb: Option<f64>,
    degenerate: Option<bool>,
}

fn robustness(a: &RobustnessArgs, argv: &[String]) -> Result<(), CliError> {
    let (records, info) = data::load_records(&a.data)?;
    let strategy = data::strategy(&a.data)?;
    let table = data::estimate_table(&records, &strategy, &BinSpec::parse(&a.bins)?)?;
    let grid: Vec<f64> = if a.grid.is_empty() {
        if !(a.grid_step > 0.0 && a.grid_step <= 1.0) {
            return Err(Error::Domain(format!("grid step must lie in (0, 1], got {}", a.grid_step)).into());
        }
        let n = (1.0 / a.grid_step).round() as usize;
        (0..=n).map(|i| (i as f64 * a.grid_step).min(1.0)).collect()
    } else {
        a.grid.clone()
    };
    let mut points = Vec::with_capacity(grid.len());
    for &dbar in &grid {
        if !(0.0..=1.0).contains(&dbar) {
            return Err(Error::Domain(format!("defier budgets must lie in [0, 1], got {dbar}")).into());
        }
        let r = RestrictionSet::realize(budget_kind(&table, dbar), table.support())?;
        points.push(match nu_pooled_lower_bound(&table, &r) {
            Ok(b) => GridPoint { dbar, feasible: true, nu_pooled_lb: Some(b.value), degenerate: Some(b.degenerate) },
            Err(Error::Identification { .. }) => {
                GridPoint { dbar, feasible: false, nu_pooled_lb: None, degenerate: None }
            }
            Err(e) => return Err(e.into()),
        });
    }
    let breakdown = match table.support().order() {
        MediatorOrder::Total => Some(breakdown_defier_budget(&table)?),
        _ => None,
    };

    let csv_path = a.output.out.clone().unwrap_or_else(|| PathBuf::from("robustness.csv"));
    let mut w = csv_writer(&csv_path)?;
    let werr = |e| io_err(&csv_path, e);
    w.write_record(["dbar", "feasible", "nu_pooled_lb", "degenerate"]).map_err(werr)?;
    for p in &points {
        w.write_record([
            p.dbar.to_string(),
            p.feasible.to_string(),
            p.nu_pooled_lb.map_or(String::new(), |v| v.to_string()),
            p.degenerate.map_or(String::new(), |v| v.to_string()),
        ])
        .map_err(werr)?;
    }
    finish_csv(w, &csv_path)?;

    let summary = json!({
        "strategy": strategy.label(),
        "budget": match table.support().order() { MediatorOrder::Total => "defier_budget", _ => "elementwise_budget" },
        "points": points,
        "breakdown": breakdown,
        "csv": path_string(&csv_path),
    });
    emit_json(&summary, None)?;

    let mut m = Manifest::new("robustness", argv, a);
    m.input = Some(&info);
    m.outputs = vec![path_string(&csv_path)];
    m.write(&manifest_path(a.output.manifest.as_ref(), Some(&csv_path)))
}

fn ade(a: &AdeArgs, argv: &[String]) -> Result<(), CliError> {
    let (records, info) = data::load_records(&a.data)?;
    let strategy = data::strategy(&a.data)?;
    let table = data::estimate_table(&records, &strategy, &BinSpec::parse(&a.bins)?)?;
    if table.numeric_levels().is_none() {
        return Err(Error::Unsupported("direct-effect bounds need point outcome levels; use --bins raw".into()).into());
    }
    let r = data::restriction(&a.data.restriction, table.support())?;
    let (spec, relaxed) = resolve_identified_set(&table, &r, a.data.auto_relax)?;
    let ks: Vec<usize> = match a.k {
        Some(k) => vec![k],
        None => (0..table.k()).collect(),
    };
    let intervals = ks
        .iter()
        .map(|&k| {
            let iv = ade_bounds(&table, spec.restriction(), k)?;
            Ok(json!({
                "k": k,
                "m": point_label(&table.support().points()[k]),
                "lb": iv.lb,
                "ub": iv.ub,
                "informative": iv.informative,
            }))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let out = json!({
        "strategy": strategy.label(),
        "restriction": spec.restriction().label(),
        "auto_relaxed_dbar": relaxed,
        "intervals": intervals,
    });
    emit_json(&out, a.output.out.as_deref())?;

    let mut m = Manifest::new("ade", argv, a);
    m.input = Some(&info);
    m.outputs = a.output.out.iter().map(|p| path_string(p)).collect();
    m.write(&manifest_path(a.output.manifest.as_ref(), a.output.out.as_ref()))
}

fn diagnose(a: &DiagnoseArgs, argv: &[String]) -> Result<(), CliError> {
    let (records, info) = data::load_records(&a.data)?;
    let strategy = data::strategy(&a.data)?;
    let bins = BinSpec::parse(&a.bins)?;
    let support = register_support(&records)?;
    let levels = bins.levels(&records)?;

    let mut cells: HashMap<(u8, usize, usize), (usize, HashSet<String>)> = HashMap::new();
    for (i, row) in records.rows().iter().enumerate() {
        let k = support.index_of(&row.m).expect("registered support");
        let q = levels.iter().position(|l| l.contains(row.y)).expect("levels cover every outcome");
        let e = cells.entry((row.d, k, q)).or_default();
        e.0 += 1;
        e.1.insert(row.cluster.clone().unwrap_or_else(|| format!("#{i}")));
    }
    let mut cell_rows = Vec::new();
    let mut sparse = 0;
    for d in 0..2u8 {
        for k in 0..support.len() {
            for (q, level) in levels.iter().enumerate() {
                let (n, units) = cells.get(&(d, k, q)).map_or((0, 0), |(n, s)| (*n, s.len()));
                if (units as f64) < a.cell_floor {
                    sparse += 1;
                }
                cell_rows.push(json!({
                    "d": d, "k": k, "m": point_label(&support.points()[k]), "y": level_label(level),
                    "rows": n, "units": units,
                }));
            }
        }
    }

    let identification = match data::estimate_table(&records, &strategy, &bins) {
        Ok(table) => {
            let r = data::restriction(&a.data.restriction, table.support())?;
            let spec = build_identified_set(&table, &r)?;
            let min_dbar = match table.support().order() {
                MediatorOrder::Total => Some(minimal_defier_budget(&table, false)?),
                _ => None,
            };
            merged(
                table_summary(&table),
                json!({
                    "restriction": r.label(),
                    "feasible": spec.is_feasible(),
                    "min_defier_budget": min_dbar,
                    "estimation_error": Value::Null,
                }),
            )
        }
        Err(CliError::Core(e)) => json!({ "estimation_error": e.to_string() }),
        Err(e) => return Err(e),
    };
    let first_stage = match strategy {
        Strategy::Iv => Some(ZJoint::from_records(&records)?.first_stage()),
        _ => None,
    };
    let out = json!({
        "strategy": strategy.label(),
        "n_rows": [records.arm_size(0), records.arm_size(1)],
        "n_clusters": [records.arm_clusters(0), records.arm_clusters(1)],
        "cells": cell_rows,
        "median_cell_count": mc::median_cell_count(&records, &bins)?,
        "cell_floor": a.cell_floor,
        "sparse_cells": sparse,
        "first_stage": first_stage,
        "identification": identification,
    });
    emit_json(&out, a.output.out.as_deref())?;

    let mut m = Manifest::new("diagnose", argv, a);
    m.input = Some(&info);
    m.outputs = a.output.out.iter().map(|p| path_string(p)).collect();
    m.write(&manifest_path(a.output.manifest.as_ref(), a.output.out.as_ref()))
}

fn synthetic_pools(design: &str, size: usize, seed: u64) -> Result<(RecordSet, RecordSet), CliError> {
    Ok(match design {
        "binary" => pools::binary(seed, size),
        "continuous" => pools::continuous(seed, size),
        "clustered" => pools::clustered(seed, 40, (size / 40).max(2)),
        "ordered" => pools::ordered(seed, size),
        "power" => pools::power(),
        other => {
            return Err(Error::Structural(format!(
                "unknown design `{other}` (expected binary, continuous, clustered, ordered or power)"
            ))
            .into())
        }
    })
}

fn opt_field<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn simulate(a: &SimulateArgs, argv: &[String]) -> Result<(), CliError> {
    let design = match a.clusters {
        Some(per_arm) => SampleDesign::Clusters { per_arm },
        None => SampleDesign::Units { control: a.n, treated: a.n },
    };
    let (dgp, info, design_name) = match &a.input {
        Some(path) => {
            let (records, info) = data::load_records_from(path, None)?;
            (MixtureDgp::from_records(&records, a.t, design)?, Some(info), "input".to_string())
        }
        None => {
            let name = a
                .design
                .clone()
                .unwrap_or_else(|| if a.clusters.is_some() { "clustered" } else { "continuous" }.to_string());
            let (c, t) = synthetic_pools(&name, a.pool_size, a.pool_seed)?;
            (MixtureDgp::new(c, t, a.t, design)?, None, name)
        }
    };
    let spec = TestSpec {
        restriction: data::restriction_kind(&a.restriction)?,
        bins: BinSpec::parse(&a.bins)?,
        method: TestMethod::parse(&a.method, a.draws, a.seed)?,
        alpha: a.alpha,
        allow_relax: a.auto_relax,
    };
    let report = mc::rejection_rate(&dgp, &spec, a.nsims, a.seed)?;

    let mut w = csv_writer(&a.out)?;
    let werr = |e| io_err(&a.out, e);
    w.write_record(["sim_id", "statistic", "p_value", "reject", "nu_pooled_lb", "median_cell_count"]).map_err(werr)?;
    for s in &report.sims {
        w.write_record([
            s.sim_id.to_string(),
            opt_field(s.statistic),
            opt_field(s.p_value),
            opt_field(s.reject),
            opt_field(s.nu_pooled_lb),
            opt_field(s.median_cell_count),
        ])
        .map_err(werr)?;
    }
    finish_csv(w, &a.out)?;

    let first_error = report.sims.iter().find_map(|s| s.error.clone());
    let summary = json!({
        "design": design_name,
        "sampling": design,
        "t": a.t,
        "nsims": a.nsims,
        "method": spec.method.label(),
        "alpha": a.alpha,
        "rate": report.rate,
        "se": report.se,
        "rejections": report.rejections,
        "successes": report.successes,
        "errors": report.errors,
        "first_error": first_error,
        "csv": path_string(&a.out),
    });
    emit_json(&summary, a.summary.as_deref())?;

    let mut m = Manifest::new("simulate", argv, a);
    m.seed = Some(a.seed);
    m.input = info.as_ref();
    m.outputs = std::iter::once(path_string(&a.out)).chain(a.summary.iter().map(|p| path_string(p))).collect();
    m.write(&manifest_path(a.manifest.as_ref(), Some(&a.out)))
}
