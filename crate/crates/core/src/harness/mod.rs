//! Experiment driver: dataset construction, single runs, parameter sweeps
//! with resumable CSV output, and report generation.

mod report;
mod sweep;

pub use report::{report, ReportFiles};
pub use sweep::{append_record, read_records, run_sweep, CsvRow, RunKey, SweepGrid, SweepOutcome, SCHEMA_VERSION};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::OptLevel;
use crate::graph::{self, Graph, GraphError};
use crate::metrics::{RunRecord, Task};
use crate::models::{self, Dataset, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: schema version {found} is not supported (expected {expected})")]
    Schema { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: completed row for {key} was produced with a different configuration ({existing} vs {requested})")]
    ResumeConflict {
        path: PathBuf,
        key: String,
        existing: String,
        requested: String,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// BA attachments per new vertex.
pub const BA_ATTACHMENTS: usize = 2;
/// Width of the random feature matrix used when features are enabled.
pub const FEATURE_DIM: usize = 128;
pub const FEATURE_DENSITY: f64 = 0.05;
pub const TRAIN_PER_CLASS: usize = 20;
pub const VAL_VERTICES: usize = 500;
pub const VAL_EDGE_FRACTION: f64 = 0.05;
pub const TEST_EDGE_FRACTION: f64 = 0.10;

/// Where a run's graph comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// Generated BA graph with hub-parity labels.
    Ba { n: usize, features: bool, seed: u64 },
    /// Graph directory written by [`make_dataset`] or by hand.
    Dir(PathBuf),
}

/// BA graph with hub-parity labels and, optionally, random features.
pub fn ba_graph(n: usize, features: bool, seed: u64) -> Result<Graph, GraphError> {
    let g = graph::barabasi_albert(n, BA_ATTACHMENTS, seed)?;
    let labels = graph::hub_parity_labels(&g);
    let g = g.with_labels(labels)?;
    if features {
        g.with_features(graph::random_features(n, FEATURE_DIM, FEATURE_DENSITY, seed))
    } else {
        Ok(g)
    }
}

/// Splits `g` for `task` with the default protocol. Classification needs
/// labels; link prediction ignores them.
pub fn prepare(g: Graph, task: Task, seed: u64) -> Result<Dataset, GraphError> {
    match task {
        Task::Classify => {
            let val = VAL_VERTICES.min(g.real_count().saturating_sub(TRAIN_PER_CLASS * g.class_count()));
            let split = graph::split_vertices(&g, TRAIN_PER_CLASS, val, None, seed)?;
            Ok(Dataset::classification(g, split))
        }
        Task::Link => {
            let split = graph::split_edges(&g, VAL_EDGE_FRACTION, TEST_EDGE_FRACTION, seed)?;
            Dataset::link(g, split)
        }
    }
}

pub fn load_dataset(source: &Source, task: Task) -> Result<Dataset, GraphError> {
    match source {
        Source::Ba { n, features, seed } => prepare(ba_graph(*n, *features, *seed)?, task, *seed),
        Source::Dir(dir) => prepare(graph::load_graph(dir)?, task, 0),
    }
}

/// Writes a BA graph (or re-serializes a loaded one) into `out_dir`.
pub fn make_dataset(source: &Source, out_dir: &Path) -> Result<Graph, GraphError> {
    let g = match source {
        Source::Ba { n, features, seed } => ba_graph(*n, *features, *seed)?,
        Source::Dir(dir) => graph::load_graph(dir)?,
    };
    graph::save_graph(&g, out_dir)?;
    Ok(g)
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub task: Task,
    pub level: OptLevel,
    pub source: Source,
    pub model_size: usize,
    pub padding: bool,
    pub seed: u64,
    pub epochs: usize,
    pub memory_budget: Option<u64>,
}

impl RunSpec {
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::for_task(self.task, self.level);
        cfg.hidden = self.model_size;
        cfg.latent = None;
        cfg.padding = self.padding;
        cfg.seed = self.seed;
        cfg.epochs = self.epochs;
        cfg.memory_budget = self.memory_budget;
        cfg
    }
}

pub fn run_single(spec: &RunSpec) -> Result<RunRecord, HarnessError> {
    let dataset = load_dataset(&spec.source, spec.task)?;
    Ok(models::train(&dataset, &spec.train_config())?)
}

/// Multi-line human-readable digest of a record.
pub fn describe(r: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} {} n={} d={} features={} padding={} seed={} epochs={}",
        r.task, r.level, r.n, r.d, r.features, r.padding, r.seed, r.epochs
    );
    let metric = |name: &str, v: Option<f64>, s: &mut String| {
        if let Some(v) = v {
            let _ = write!(s, " {name}={v:.4}");
        }
    };
    s.push_str("  final_loss=");
    let _ = write!(s, "{:.6}", r.final_loss);
    metric("accuracy", r.accuracy, &mut s);
    metric("auc_roc", r.auc_roc, &mut s);
    metric("auc_pr", r.auc_pr, &mut s);
    metric("ap", r.ap, &mut s);
    s.push('\n');
    let _ = writeln!(
        s,
        "  peak_bytes={} wall_ms={:.1} gemms={} eligible={} ({:.3})",
        r.peak_bytes,
        r.wall_ms,
        r.gemm_count,
        r.eligible_gemm_count,
        r.eligible_fraction()
    );
    if r.oom || r.collapsed {
        let _ = writeln!(s, "  oom={} collapsed={}", r.oom, r.collapsed);
    }
    s
}
