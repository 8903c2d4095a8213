use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{io_err, read_records, HarnessError};
use crate::autodiff::OptLevel;
use crate::metrics::{mean_std, summarize, CellKey, RunRecord, Task};

/// Paths written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub delta_table: PathBuf,
    pub delta_summary: PathBuf,
    pub speedup_table: PathBuf,
    pub curves_full: PathBuf,
    pub curves_by_n: PathBuf,
    pub curves_by_d: PathBuf,
}

#[derive(Serialize)]
struct DeltaRow {
    task: Task,
    level: OptLevel,
    n: usize,
    d: usize,
    features: bool,
    padding: bool,
    matched_seeds: usize,
    delta_accuracy: Option<f64>,
    delta_auc_roc: Option<f64>,
    delta_auc_pr: Option<f64>,
    delta_ap: Option<f64>,
    baseline_missing: bool,
}

#[derive(Serialize)]
struct DeltaSummaryRow {
    task: Task,
    level: OptLevel,
    features: bool,
    padding: bool,
    cells: usize,
    delta_accuracy: Option<f64>,
    delta_auc_roc: Option<f64>,
    delta_auc_pr: Option<f64>,
    delta_ap: Option<f64>,
}

#[derive(Serialize)]
struct SpeedupRow {
    task: Task,
    level: OptLevel,
    n: usize,
    d: usize,
    features: bool,
    padding: bool,
    runs: usize,
    mean_wall_ms: Option<f64>,
    mean_peak_bytes: Option<f64>,
    speedup: Option<f64>,
    memory_ratio: Option<f64>,
    eligible_fraction: f64,
    oom_rate: f64,
    baseline_missing: bool,
}

#[derive(Serialize)]
struct CurveRow {
    task: Task,
    level: OptLevel,
    features: bool,
    padding: bool,
    n: Option<usize>,
    d: Option<usize>,
    runs: usize,
    wall_ms_mean: Option<f64>,
    wall_ms_std: Option<f64>,
    speedup_mean: Option<f64>,
    speedup_std: Option<f64>,
    peak_bytes_mean: Option<f64>,
    peak_bytes_std: Option<f64>,
    oom_rate: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    // An empty table still gets its header line.
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let mut bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    if rows.is_empty() {
        bytes = format!("{header}\n").into_bytes();
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn stats(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(values);
        (Some(m), Some(s))
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    stats(&v).0
}

/// Curve grouping: `by_n` keeps `n` and pools `d`, `by_d` the reverse,
/// both keep neither axis pooled.
#[derive(Clone, Copy)]
struct Axes {
    n: bool,
    d: bool,
}

fn curves(records: &[RunRecord], axes: Axes) -> Vec<CurveRow> {
    let runs: BTreeMap<(CellKey, u64), &RunRecord> =
        records.iter().map(|r| ((CellKey::of(r), r.seed), r)).rev().collect();
    let mut groups: BTreeMap<(Task, OptLevel, bool, bool, Option<usize>, Option<usize>), Vec<&RunRecord>> =
        BTreeMap::new();
    for r in runs.values() {
        let key = (
            r.task,
            r.level,
            r.features,
            r.padding,
            axes.n.then_some(r.n),
            axes.d.then_some(r.d),
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((task, level, features, padding, n, d), rs)| {
            let ok: Vec<&RunRecord> = rs.iter().copied().filter(|r| !r.oom).collect();
            let walls: Vec<f64> = ok.iter().map(|r| r.wall_ms).collect();
            let peaks: Vec<f64> = ok.iter().map(|r| r.peak_bytes as f64).collect();
            let speedups: Vec<f64> = ok
                .iter()
                .filter_map(|r| {
                    let base = CellKey {
                        level: OptLevel::O0,
                        ..CellKey::of(r)
                    };
                    let b = runs.get(&(base, r.seed)).filter(|b| !b.oom)?;
                    (r.wall_ms > 0.0).then(|| b.wall_ms / r.wall_ms)
                })
                .collect();
            let (wall_ms_mean, wall_ms_std) = stats(&walls);
            let (speedup_mean, speedup_std) = stats(&speedups);
            let (peak_bytes_mean, peak_bytes_std) = stats(&peaks);
            CurveRow {
                task,
                level,
                features,
                padding,
                n,
                d,
                runs: rs.len(),
                wall_ms_mean,
                wall_ms_std,
                speedup_mean,
                speedup_std,
                peak_bytes_mean,
                peak_bytes_std,
                oom_rate: (rs.len() - ok.len()) as f64 / rs.len() as f64,
            }
        })
        .collect()
}

const DELTA_HEADER: &str = "task,level,n,d,features,padding,matched_seeds,delta_accuracy,delta_auc_roc,\
                            delta_auc_pr,delta_ap,baseline_missing";
const DELTA_SUMMARY_HEADER: &str =
    "task,level,features,padding,cells,delta_accuracy,delta_auc_roc,delta_auc_pr,delta_ap";
const SPEEDUP_HEADER: &str = "task,level,n,d,features,padding,runs,mean_wall_ms,mean_peak_bytes,speedup,\
                              memory_ratio,eligible_fraction,oom_rate,baseline_missing";
const CURVE_HEADER: &str = "task,level,features,padding,n,d,runs,wall_ms_mean,wall_ms_std,speedup_mean,\
                            speedup_std,peak_bytes_mean,peak_bytes_std,oom_rate";

/// Reads a sweep CSV and writes delta tables and plot-ready curves into
/// `out_dir`. Output depends only on the set of rows, not their order.
pub fn report(csv_path: &Path, out_dir: &Path) -> Result<ReportFiles, HarnessError> {
    let mut records = read_records(csv_path)?;
    records.sort_by(|a, b| {
        (CellKey::of(a), a.seed)
            .cmp(&(CellKey::of(b), b.seed))
            .then(a.wall_ms.total_cmp(&b.wall_ms))
    });
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let summary = summarize(&records);

    let deltas: Vec<DeltaRow> = summary
        .deltas
        .iter()
        .map(|c| DeltaRow {
            task: c.key.task,
            level: c.key.level,
            n: c.key.n,
            d: c.key.d,
            features: c.key.features,
            padding: c.key.padding,
            matched_seeds: c.matched_seeds,
            delta_accuracy: c.delta_accuracy,
            delta_auc_roc: c.delta_auc_roc,
            delta_auc_pr: c.delta_auc_pr,
            delta_ap: c.delta_ap,
            baseline_missing: c.baseline_missing,
        })
        .collect();

    let mut grouped: BTreeMap<(Task, OptLevel, bool, bool), Vec<&DeltaRow>> = BTreeMap::new();
    for d in deltas.iter().filter(|d| !d.baseline_missing && d.matched_seeds > 0) {
        grouped.entry((d.task, d.level, d.features, d.padding)).or_default().push(d);
    }
    let delta_summary: Vec<DeltaSummaryRow> = grouped
        .into_iter()
        .map(|((task, level, features, padding), rows)| DeltaSummaryRow {
            task,
            level,
            features,
            padding,
            cells: rows.len(),
            delta_accuracy: mean_opt(rows.iter().map(|r| r.delta_accuracy)),
            delta_auc_roc: mean_opt(rows.iter().map(|r| r.delta_auc_roc)),
            delta_auc_pr: mean_opt(rows.iter().map(|r| r.delta_auc_pr)),
            delta_ap: mean_opt(rows.iter().map(|r| r.delta_ap)),
        })
        .collect();

    let speedups: Vec<SpeedupRow> = summary
        .speedups
        .iter()
        .map(|c| SpeedupRow {
            task: c.key.task,
            level: c.key.level,
            n: c.key.n,
            d: c.key.d,
            features: c.key.features,
            padding: c.key.padding,
            runs: c.runs,
            mean_wall_ms: c.mean_wall_ms,
            mean_peak_bytes: c.mean_peak_bytes,
            speedup: c.speedup,
            memory_ratio: c.memory_ratio,
            eligible_fraction: c.eligible_fraction,
            oom_rate: c.oom_rate,
            baseline_missing: c.baseline_missing,
        })
        .collect();

    let files = ReportFiles {
        delta_table: out_dir.join("delta_table.csv"),
        delta_summary: out_dir.join("delta_summary.csv"),
        speedup_table: out_dir.join("speedup_table.csv"),
        curves_full: out_dir.join("curves_full.csv"),
        curves_by_n: out_dir.join("curves_by_n.csv"),
        curves_by_d: out_dir.join("curves_by_d.csv"),
    };
    write_csv(&files.delta_table, &deltas, DELTA_HEADER)?;
    write_csv(&files.delta_summary, &delta_summary, DELTA_SUMMARY_HEADER)?;
    write_csv(&files.speedup_table, &speedups, SPEEDUP_HEADER)?;
    write_csv(&files.curves_full, &curves(&records, Axes { n: true, d: true }), CURVE_HEADER)?;
    write_csv(&files.curves_by_n, &curves(&records, Axes { n: true, d: false }), CURVE_HEADER)?;
    write_csv(&files.curves_by_d, &curves(&records, Axes { n: false, d: true }), CURVE_HEADER)?;
    Ok(files)
}
