use std::collections::BTreeMap;

use serde::Serialize;

use super::{RunRecord, Task};
use crate::autodiff::OptLevel;

/// Grid cell a record belongs to, seed excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CellKey {
    pub task: Task,
    pub level: OptLevel,
    pub n: usize,
    pub d: usize,
    pub features: bool,
    pub padding: bool,
}

impl CellKey {
    pub fn of(r: &RunRecord) -> CellKey {
        CellKey {
            task: r.task,
            level: r.level,
            n: r.n,
            d: r.d,
            features: r.features,
            padding: r.padding,
        }
    }

    fn baseline(self) -> CellKey {
        CellKey {
            level: OptLevel::O0,
            ..self
        }
    }
}

/// Seed-matched metric differences `Ox - O0`, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaCell {
    #[serde(flatten)]
    pub key: CellKey,
    pub matched_seeds: usize,
    pub delta_accuracy: Option<f64>,
    pub delta_auc_roc: Option<f64>,
    pub delta_auc_pr: Option<f64>,
    pub delta_ap: Option<f64>,
    pub baseline_missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupCell {
    #[serde(flatten)]
    pub key: CellKey,
    pub runs: usize,
    pub mean_wall_ms: Option<f64>,
    pub mean_peak_bytes: Option<f64>,
    /// `wall(O0) / wall(Ox)` over seed-matched, non-OOM pairs.
    pub speedup: Option<f64>,
    /// `peak(Ox) / peak(O0)` over the same pairs.
    pub memory_ratio: Option<f64>,
    pub eligible_fraction: f64,
    pub oom_rate: f64,
    pub baseline_missing: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub deltas: Vec<DeltaCell>,
    pub speedups: Vec<SpeedupCell>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the delta and speedup tables. Records repeating a (cell, seed)
/// pair are counted once, so the tables are unchanged by duplicated input.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut cells: BTreeMap<CellKey, BTreeMap<u64, &RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(CellKey::of(r)).or_default().entry(r.seed).or_insert(r);
    }

    let mut summary = Summary::default();
    for (&key, runs) in &cells {
        let baseline = cells.get(&key.baseline());
        let pairs: Vec<(&RunRecord, &RunRecord)> = match baseline {
            Some(base) => runs
                .iter()
                .filter_map(|(seed, &r)| base.get(seed).map(|&b| (r, b)))
                .filter(|(r, b)| !r.oom && !b.oom)
                .collect(),
            None => Vec::new(),
        };
        let missing = baseline.is_none();

        if key.level != OptLevel::O0 {
            let delta = |f: fn(&RunRecord) -> Option<f64>| {
                mean(pairs.iter().filter_map(|(r, b)| Some(f(r)? - f(b)?)))
            };
            summary.deltas.push(DeltaCell {
                key,
                matched_seeds: pairs.len(),
                delta_accuracy: delta(|r| r.accuracy),
                delta_auc_roc: delta(|r| r.auc_roc),
                delta_auc_pr: delta(|r| r.auc_pr),
                delta_ap: delta(|r| r.ap),
                baseline_missing: missing,
            });
        }

        let finished: Vec<&RunRecord> = runs.values().copied().filter(|r| !r.oom).collect();
        let ratio = |num: Option<f64>, den: Option<f64>| match (num, den) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        let gemms: u64 = runs.values().map(|r| r.gemm_count).sum();
        let eligible: u64 = runs.values().map(|r| r.eligible_gemm_count).sum();
        summary.speedups.push(SpeedupCell {
            key,
            runs: runs.len(),
            mean_wall_ms: mean(finished.iter().map(|r| r.wall_ms)),
            mean_peak_bytes: mean(finished.iter().map(|r| r.peak_bytes as f64)),
            speedup: ratio(
                mean(pairs.iter().map(|(_, b)| b.wall_ms)),
                mean(pairs.iter().map(|(r, _)| r.wall_ms)),
            ),
            memory_ratio: ratio(
                mean(pairs.iter().map(|(r, _)| r.peak_bytes as f64)),
                mean(pairs.iter().map(|(_, b)| b.peak_bytes as f64)),
            ),
            eligible_fraction: if gemms == 0 { 0.0 } else { eligible as f64 / gemms as f64 },
            oom_rate: runs.values().filter(|r| r.oom).count() as f64 / runs.len() as f64,
            baseline_missing: missing,
        });
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(level: OptLevel, seed: u64, accuracy: f64, wall_ms: f64) -> RunRecord {
        RunRecord {
            task: Task::Classify,
            level,
            n: 2048,
            d: 16,
            features: false,
            padding: true,
            seed,
            epochs: 10,
            final_loss: 0.5,
            accuracy: Some(accuracy),
            auc_roc: None,
            auc_pr: None,
            ap: None,
            peak_bytes: 1000,
            wall_ms,
            gemm_count: 10,
            eligible_gemm_count: 0,
            oom: false,
            collapsed: false,
            loss_curve: vec![],
        }
    }

    #[test]
    fn clone_of_baseline_has_zero_delta() {
        let mut records = Vec::new();
        for seed in 0..3 {
            let base = record(OptLevel::O0, seed, 0.5 + seed as f64 / 10.0, 10.0);
            let mut ox = base.clone();
            ox.level = OptLevel::O1;
            records.extend([base, ox]);
        }
        let s = summarize(&records);
        assert_eq!(s.deltas.len(), 1);
        assert_eq!(s.deltas[0].delta_accuracy, Some(0.0));
        let o1 = s.speedups.iter().find(|c| c.key.level == OptLevel::O1).unwrap();
        assert_eq!(o1.speedup, Some(1.0));
        assert_eq!(o1.memory_ratio, Some(1.0));
    }

    #[test]
    fn speedup_ratio_and_missing_baseline() {
        let records = [record(OptLevel::O0, 0, 0.5, 10.0), record(OptLevel::O1, 0, 0.4, 4.0)];
        let s = summarize(&records);
        let o1 = s.speedups.iter().find(|c| c.key.level == OptLevel::O1).unwrap();
        assert_eq!(o1.speedup, Some(2.5));
        assert!((s.deltas[0].delta_accuracy.unwrap() + 0.1).abs() < 1e-12);

        let lonely = summarize(&[record(OptLevel::O2, 0, 0.5, 1.0)]);
        assert!(lonely.deltas[0].baseline_missing);
        assert_eq!(lonely.deltas[0].delta_accuracy, None);
        assert_eq!(lonely.speedups[0].speedup, None);
    }

    #[test]
    fn duplicates_do_not_change_tables() {
        let mut records: Vec<RunRecord> = (0..4)
            .flat_map(|s| {
                [
                    record(OptLevel::O0, s, 0.6, 10.0 + s as f64),
                    record(OptLevel::O3, s, 0.2 * s as f64, 3.0),
                ]
            })
            .collect();
        let once = summarize(&records);
        records.extend(records.clone());
        assert_eq!(summarize(&records), once);
    }

    #[test]
    fn oom_rows_excluded_and_counted() {
        let mut oom = record(OptLevel::O1, 1, 0.0, 99.0);
        oom.oom = true;
        let records = [
            record(OptLevel::O0, 0, 0.5, 10.0),
            record(OptLevel::O0, 1, 0.5, 10.0),
            record(OptLevel::O1, 0, 0.5, 5.0),
            oom,
        ];
        let s = summarize(&records);
        let o1 = s.speedups.iter().find(|c| c.key.level == OptLevel::O1).unwrap();
        assert_eq!(o1.oom_rate, 0.5);
        assert_eq!(o1.mean_wall_ms, Some(5.0));
        assert_eq!(s.deltas[0].matched_seeds, 1);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 6.0]);
        assert_eq!(m, 4.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
