//! Evaluation metrics, run records and Ox-versus-O0 summaries.

mod summary;

pub use summary::{mean_std, summarize, CellKey, DeltaCell, SpeedupCell, Summary};

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptLevel;
use crate::tensor::PrecisionMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric needs a non-empty selection")]
    Empty,
    #[error("metric needs both positive and negative labels")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("unknown task `{0}` (expected classify or link)")]
    UnknownTask(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// GCN vertex classification.
    Classify,
    /// GAE link prediction.
    Link,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Link => "link",
        })
    }
}

impl FromStr for Task {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Task, MetricError> {
        match s {
            "classify" => Ok(Task::Classify),
            "link" | "link_predict" => Ok(Task::Link),
            other => Err(MetricError::UnknownTask(other.to_string())),
        }
    }
}

/// One training run: configuration plus outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub level: OptLevel,
    /// Vertex count before padding.
    pub n: usize,
    pub d: usize,
    pub features: bool,
    pub padding: bool,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub ap: Option<f64>,
    pub peak_bytes: u64,
    pub wall_ms: f64,
    pub gemm_count: u64,
    pub eligible_gemm_count: u64,
    pub oom: bool,
    pub collapsed: bool,
    #[serde(skip)]
    pub loss_curve: Vec<f64>,
}

impl RunRecord {
    /// Equality on everything except wall time, with NaN equal to NaN.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| {
            let mut r = r.clone();
            r.wall_ms = 0.0;
            format!("{r:?}")
        };
        strip(self) == strip(other)
    }

    pub fn eligible_fraction(&self) -> f64 {
        if self.gemm_count == 0 {
            0.0
        } else {
            self.eligible_gemm_count as f64 / self.gemm_count as f64
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index and NaN
/// never wins.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] || (row[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Fraction of `rows` whose argmax logit equals the matching entry of
/// `labels`.
pub fn accuracy(logits: &PrecisionMatrix, rows: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::Empty);
    }
    if rows.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: rows.len(),
            labels: labels.len(),
        });
    }
    let values = logits.values();
    let c = logits.cols();
    let correct = rows
        .iter()
        .zip(labels)
        .filter(|(&r, &l)| argmax(&values[r * c..(r + 1) * c]) == l)
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

fn check_lengths(scores: &[f32], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

fn desc(a: f32, b: f32) -> Ordering {
    b.total_cmp(&a)
}

fn tied(a: f32, b: f32) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// ROC-AUC via mid-ranks: ties between a positive and a negative count 1/2.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| desc(scores[b], scores[a]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && tied(scores[order[j + 1]], scores[order[i]]) {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Items in descending score order; equal scores keep index order.
fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| desc(scores[a], scores[b]));
    order
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut hits = 0usize;
    let mut total = 0.0f64;
    for (rank, &k) in ranking(scores).iter().enumerate() {
        if labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Trapezoidal area under the precision-recall curve, one point per distinct
/// score threshold, anchored at recall 0 with the first point's precision.
pub fn pr_auc(scores: &[f32], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricError::SingleClass);
    }
    let order = ranking(scores);
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && tied(scores[order[i]], s) {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
    }
    let mut area = 0.0;
    let mut prev = (0.0, points[0].1);
    for &(r, p) in &points {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    Ok(area)
}
