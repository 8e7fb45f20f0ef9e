//! Report files: JSON reports, CSV figure data, snapshot analysis outputs.
//!
//! Every file written here is a pure function of its inputs. Wall-clock
//! timestamps go only to the `run.log` sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::sweep::{MatchedCurves, SweepReport, XiCurve};
use super::{io_error, ExperimentError, RunReport};
use crate::stiffness::{
    read_snapshot, Analyzer, ModeAnalysis, PairMode, SnapshotMeta, StiffnessMetric,
};

pub const SCHEMA_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Csv {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_error(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Json {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

/// Appends a timestamped line to `<dir>/run.log`.
pub fn log_event(dir: &Path, message: &str) -> Result<(), ExperimentError> {
    let path = dir.join("run.log");
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_error(&path))?;
    writeln!(f, "{ts:.3} {message}").map_err(io_error(&path))
}

const XI_HEADER: [&str; 7] = ["epoch", "lr", "train_loss", "xi", "xi_valid", "slope", "intercept"];

fn xi_rows(curves: &[&XiCurve]) -> Vec<Vec<String>> {
    curves
        .iter()
        .flat_map(|c| {
            c.points.iter().map(move |p| {
                vec![
                    p.epoch.to_string(),
                    c.learning_rate.to_string(),
                    p.train_loss.to_string(),
                    opt(p.xi),
                    p.valid.to_string(),
                    opt(p.slope),
                    opt(p.intercept),
                ]
            })
        })
        .collect()
}

fn pairs_in(runs: &[&RunReport]) -> Vec<(StiffnessMetric, PairMode)> {
    let mut out = Vec::new();
    for m in StiffnessMetric::ALL {
        for p in PairMode::ALL {
            let present = runs
                .iter()
                .any(|r| r.reports.iter().any(|e| e.analysis(m, p).is_some()));
            if present {
                out.push((m, p));
            }
        }
    }
    out
}

fn xi_curve_path(dir: &Path, metric: StiffnessMetric, mode: PairMode) -> PathBuf {
    dir.join(format!("xi_curve_{}_{}.csv", metric.name(), mode.name()))
}

fn write_xi_curves(dir: &Path, runs: &[&RunReport]) -> Result<(), ExperimentError> {
    for (metric, mode) in pairs_in(runs) {
        let curves: Vec<XiCurve> = runs.iter().map(|r| XiCurve::from_run(r, metric, mode)).collect();
        let refs: Vec<&XiCurve> = curves.iter().collect();
        write_csv(&xi_curve_path(dir, metric, mode), &XI_HEADER, &xi_rows(&refs))?;
    }
    Ok(())
}

const BIN_HEADER: [&str; 10] = ["run", "lr", "epoch", "metric", "mode", "lo", "hi", "mean", "std_err", "count"];

fn bin_rows(runs: &[&RunReport]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for rep in &run.reports {
            for a in &rep.analyses {
                for b in &a.profile_bins {
                    rows.push(vec![
                        i.to_string(),
                        run.learning_rate.to_string(),
                        rep.epoch.to_string(),
                        a.metric.name().into(),
                        a.mode.name().into(),
                        b.lo.to_string(),
                        b.hi.to_string(),
                        opt(b.mean),
                        opt(b.std_err),
                        b.count.to_string(),
                    ]);
                }
            }
        }
    }
    rows
}

/// Writes `report.json`, the ξ curve CSVs and `profile_bins.csv`.
pub fn write_run_outputs(dir: &Path, run: &RunReport) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_json(&dir.join("report.json"), run)?;
    write_xi_curves(dir, &[run])?;
    write_csv(&dir.join("profile_bins.csv"), &BIN_HEADER, &bin_rows(&[run]))?;
    log_event(
        dir,
        &format!("run lr={} checkpoints={}", run.learning_rate, run.reports.len()),
    )
}

fn matched_rows(m: &MatchedCurves) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (k, loss) in m.grid.iter().enumerate() {
        for (r, lr) in m.learning_rates.iter().enumerate() {
            rows.push(vec![loss.to_string(), lr.to_string(), opt(m.xi[r][k])]);
        }
    }
    rows
}

/// Writes `sweep.json`, ξ curves for every rate, matched-loss CSVs and
/// `profile_bins.csv`.
pub fn write_sweep_outputs(dir: &Path, sweep: &SweepReport) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_json(&dir.join("sweep.json"), sweep)?;
    let runs: Vec<&RunReport> = sweep.runs.iter().collect();
    write_xi_curves(dir, &runs)?;
    write_csv(&dir.join("profile_bins.csv"), &BIN_HEADER, &bin_rows(&runs))?;
    for m in &sweep.matched {
        let path = dir.join(format!("xi_matched_{}_{}.csv", m.metric.name(), m.mode.name()));
        write_csv(&path, &["train_loss", "lr", "xi"], &matched_rows(m))?;
    }
    log_event(dir, &format!("sweep lrs={:?}", sweep.learning_rates))
}

/// A parsed report file.
#[derive(Debug, Clone, PartialEq)]
pub enum ReportFile {
    Run(RunReport),
    Sweep(SweepReport),
}

impl ReportFile {
    pub fn runs(&self) -> Vec<&RunReport> {
        match self {
            Self::Run(r) => vec![r],
            Self::Sweep(s) => s.runs.iter().collect(),
        }
    }
}

/// Parses report files. Every file must carry the supported schema version;
/// otherwise the error lists each offending file.
pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<ReportFile>, ExperimentError> {
    if paths.is_empty() {
        return Err(ExperimentError::NoInput);
    }
    let json_err = |p: &Path, e: serde_json::Error| ExperimentError::Json {
        path: p.display().to_string(),
        detail: e.to_string(),
    };
    let mut values = Vec::with_capacity(paths.len());
    let mut offenders = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(io_error(p))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_err(p, e))?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(n) if n == u64::from(SCHEMA_VERSION) => {}
            Some(n) => offenders.push(format!("{} (version {n})", p.display())),
            None => offenders.push(format!("{} (no schema_version)", p.display())),
        }
        values.push(v);
    }
    if !offenders.is_empty() {
        return Err(ExperimentError::Schema(format!(
            "unsupported schema version (expected {SCHEMA_VERSION}): {}",
            offenders.join(", ")
        )));
    }
    paths
        .iter()
        .zip(values)
        .map(|(p, v)| match v.get("kind").and_then(|k| k.as_str()) {
            Some("run") => Ok(ReportFile::Run(serde_json::from_value(v).map_err(|e| json_err(p, e))?)),
            Some("sweep") => Ok(ReportFile::Sweep(serde_json::from_value(v).map_err(|e| json_err(p, e))?)),
            other => Err(ExperimentError::Schema(format!(
                "{}: unknown report kind {other:?}",
                p.display()
            ))),
        })
        .collect()
}

/// Emits plot-ready CSVs and `summary.txt` for a set of reports.
///
/// Files: `stiffness_vs_epoch.csv` (one row per run checkpoint),
/// `class_matrix.csv` (long format), `hierarchy.csv`, `profile_bins.csv`,
/// `xi_curve_<metric>_<mode>.csv`.
pub fn write_figure_data(dir: &Path, reports: &[ReportFile]) -> Result<String, ExperimentError> {
    if reports.is_empty() {
        return Err(ExperimentError::NoInput);
    }
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let runs: Vec<&RunReport> = reports.iter().flat_map(ReportFile::runs).collect();
    let pairs = pairs_in(&runs);

    let mut header: Vec<String> = ["run", "lr", "epoch", "train_loss", "val_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (m, p) in &pairs {
        for field in ["within", "within_se", "between", "between_se", "xi"] {
            header.push(format!("{}_{}_{field}", m.name(), p.name()));
        }
    }
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for rep in &run.reports {
            let mut row = vec![
                i.to_string(),
                run.learning_rate.to_string(),
                rep.epoch.to_string(),
                rep.train_loss.to_string(),
                opt(rep.val_loss),
            ];
            for &(m, p) in &pairs {
                let a = rep.analysis(m, p);
                let wb = a.and_then(|a| a.within_between);
                row.push(opt(wb.map(|w| w.within)));
                row.push(opt(wb.and_then(|w| w.within_std_err)));
                row.push(opt(wb.map(|w| w.between)));
                row.push(opt(wb.and_then(|w| w.between_std_err)));
                row.push(opt(a.and_then(|a| a.xi.xi)));
            }
            rows.push(row);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("stiffness_vs_epoch.csv"), &header_refs, &rows)?;

    let mut cm_rows = Vec::new();
    let mut h_rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for rep in &run.reports {
            for a in &rep.analyses {
                let prefix = [
                    i.to_string(),
                    run.learning_rate.to_string(),
                    rep.epoch.to_string(),
                    a.metric.name().to_string(),
                    a.mode.name().to_string(),
                ];
                cm_rows.extend(class_matrix_rows(a).into_iter().map(|r| {
                    let mut row = prefix.to_vec();
                    row.extend(r);
                    row
                }));
                if let Some(h) = &a.hierarchy {
                    for (name, stat) in [
                        ("same_class", h.same_class),
                        ("same_super_diff_class", h.same_super_diff_class),
                        ("same_ssc_diff_super", h.same_ssc_diff_super),
                        ("diff_class_baseline", h.diff_class_baseline),
                    ] {
                        let mut row = prefix.to_vec();
                        row.push(name.into());
                        row.push(opt(stat.map(|s| s.mean)));
                        row.push(opt(stat.and_then(|s| s.std_err)));
                        row.push(stat.map(|s| s.n).unwrap_or(0).to_string());
                        h_rows.push(row);
                    }
                }
            }
        }
    }
    let prefix_header = ["run", "lr", "epoch", "metric", "mode"];
    let cm_header: Vec<&str> = prefix_header
        .iter()
        .chain(&["class_a", "class_b", "value", "std_err", "pair_count"])
        .copied()
        .collect();
    write_csv(&dir.join("class_matrix.csv"), &cm_header, &cm_rows)?;
    let h_header: Vec<&str> = prefix_header
        .iter()
        .chain(&["bucket", "mean", "std_err", "n"])
        .copied()
        .collect();
    write_csv(&dir.join("hierarchy.csv"), &h_header, &h_rows)?;
    write_csv(&dir.join("profile_bins.csv"), &BIN_HEADER, &bin_rows(&runs))?;
    write_xi_curves(dir, &runs)?;

    let summary = summarize(&runs);
    fs::write(dir.join("summary.txt"), &summary).map_err(io_error(dir))?;
    Ok(summary)
}

fn class_matrix_rows(a: &ModeAnalysis) -> Vec<Vec<String>> {
    let m = &a.class_matrix;
    let mut rows = Vec::with_capacity(m.num_classes * m.num_classes);
    for i in 0..m.num_classes {
        for j in 0..m.num_classes {
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                opt(m.values[i][j]),
                opt(m.std_errs[i][j]),
                m.pair_counts[i][j].to_string(),
            ]);
        }
    }
    rows
}

/// Plain-text digest of the final checkpoint of every run.
pub fn summarize(runs: &[&RunReport]) -> String {
    let mut s = String::new();
    for (i, run) in runs.iter().enumerate() {
        let Some(last) = run.reports.last() else {
            continue;
        };
        s += &format!(
            "run {i}: lr={} layers={:?} checkpoints={}\n",
            run.learning_rate,
            run.layer_sizes,
            run.reports.len()
        );
        s += &format!(
            "  final epoch {}: train_loss={:.6} val_loss={}\n",
            last.epoch,
            last.train_loss,
            last.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
        for a in &last.analyses {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            s += &format!(
                "  {:<6} {:<11} within={} between={} xi={}\n",
                a.metric.name(),
                a.mode.name(),
                fmt(a.within_between.map(|w| w.within)),
                fmt(a.within_between.map(|w| w.between)),
                fmt(a.xi.xi),
            );
        }
        let o = &run.overfit;
        s += &format!(
            "  overfit ({} {}): loss onset={} stiffness onset={}\n",
            o.metric.name(),
            o.mode.name(),
            o.loss_onset_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
            o.stiffness_onset_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
        );
    }
    s
}

/// Result of analyzing one snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub kind: String,
    pub source: String,
    pub meta: SnapshotMeta,
    pub param_count: usize,
    pub analyses: Vec<ModeAnalysis>,
}

/// Analyzes snapshot files for every `(metric, mode)` and writes
/// `<stem>.analysis.json`, `<stem>.profile.csv` (raw same-class samples) and
/// `<stem>.bins.csv` into `out_dir`. All snapshots must share a parameter
/// count.
pub fn analyze_snapshot_file(
    paths: &[PathBuf],
    metrics: &[StiffnessMetric],
    modes: &[PairMode],
    out_dir: &Path,
) -> Result<Vec<AnalysisReport>, ExperimentError> {
    if paths.is_empty() {
        return Err(ExperimentError::NoInput);
    }
    let snaps = paths
        .iter()
        .map(|p| read_snapshot(p))
        .collect::<Result<Vec<_>, _>>()?;
    let expected = snaps[0].param_count();
    for (p, s) in paths.iter().zip(&snaps) {
        if s.param_count() != expected {
            return Err(ExperimentError::Config(format!(
                "{}: parameter count {} differs from {expected}",
                p.display(),
                s.param_count()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let mut out = Vec::with_capacity(snaps.len());
    for (p, snap) in paths.iter().zip(&snaps) {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "snapshot".into());
        let with_h = snap.records.iter().all(|r| r.super_class_id.is_some());
        let analyzer = Analyzer::new(snap)?;
        let mut analyses = Vec::new();
        let mut samples = Vec::new();
        let mut bins = Vec::new();
        for &metric in metrics {
            for &mode in modes {
                let a = analyzer.analyze(metric, mode, with_h)?;
                if let Ok(profile) = analyzer.distance_profile(metric, mode) {
                    for s in &profile.samples {
                        samples.push(vec![
                            metric.name().into(),
                            mode.name().into(),
                            s.distance.to_string(),
                            s.stiffness.to_string(),
                        ]);
                    }
                }
                for b in &a.profile_bins {
                    bins.push(vec![
                        metric.name().into(),
                        mode.name().into(),
                        b.lo.to_string(),
                        b.hi.to_string(),
                        opt(b.mean),
                        opt(b.std_err),
                        b.count.to_string(),
                    ]);
                }
                analyses.push(a);
            }
        }
        let report = AnalysisReport {
            schema_version: SCHEMA_VERSION,
            kind: "analysis".into(),
            source: p
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            meta: snap.meta.clone(),
            param_count: snap.param_count(),
            analyses,
        };
        write_json(&out_dir.join(format!("{stem}.analysis.json")), &report)?;
        write_csv(
            &out_dir.join(format!("{stem}.profile.csv")),
            &["metric", "mode", "distance", "stiffness"],
            &samples,
        )?;
        write_csv(
            &out_dir.join(format!("{stem}.bins.csv")),
            &["metric", "mode", "lo", "hi", "mean", "std_err", "count"],
            &bins,
        )?;
        out.push(report);
    }
    Ok(out)
}
