//! Two-layer GCN classifier and graph auto-encoder, and the training loop.

mod problem;

pub use problem::{gcn_layer, Activation, Evaluation, Forward, Problem};

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    check_overflow, Adam, AdamConfig, AutodiffError, GemmStats, Matrix, OptLevel, ParamState, PrecisionPolicy,
};
use crate::graph::{EdgeSplit, Graph, GraphError, VertexSplit};
use crate::metrics::{MetricError, RunRecord, Task};
use crate::tensor::{MemoryAccountant, Precision, PrecisionMatrix, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Autodiff(e.into())
    }
}

impl TrainError {
    pub fn is_oom(&self) -> bool {
        matches!(
            self,
            TrainError::Autodiff(AutodiffError::Tensor(TensorError::OutOfMemory { .. }))
                | TrainError::Graph(GraphError::Tensor(TensorError::OutOfMemory { .. }))
        )
    }
}

/// A graph prepared for one of the two tasks.
#[derive(Clone, Debug)]
pub enum Dataset {
    Classify { graph: Graph, split: VertexSplit },
    /// `train_graph` keeps only training edges and feeds the encoder.
    Link {
        graph: Graph,
        train_graph: Graph,
        split: EdgeSplit,
    },
}

impl Dataset {
    pub fn classification(graph: Graph, split: VertexSplit) -> Dataset {
        Dataset::Classify { graph, split }
    }

    pub fn link(graph: Graph, split: EdgeSplit) -> Result<Dataset, GraphError> {
        let train_graph = graph.with_edges(&split.train_edges)?;
        Ok(Dataset::Link {
            graph,
            train_graph,
            split,
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Dataset::Classify { .. } => Task::Classify,
            Dataset::Link { .. } => Task::Link,
        }
    }

    pub fn graph(&self) -> &Graph {
        match self {
            Dataset::Classify { graph, .. } | Dataset::Link { graph, .. } => graph,
        }
    }

    fn encoder_graph(&self) -> &Graph {
        match self {
            Dataset::Classify { graph, .. } => graph,
            Dataset::Link { train_graph, .. } => train_graph,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub level: OptLevel,
    /// Hidden width `d`.
    pub hidden: usize,
    /// Auto-encoder embedding width; `hidden / 2` when unset.
    pub latent: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f32,
    pub adam: AdamConfig,
    pub accumulate: Precision,
    pub padding: bool,
    pub pad_multiple: usize,
    pub memory_budget: Option<u64>,
    /// Cache constant-only subexpressions across epochs.
    pub fold_constants: bool,
}

impl TrainConfig {
    pub fn for_task(task: Task, level: OptLevel) -> TrainConfig {
        let (hidden, latent, dropout, adam) = match task {
            Task::Classify => (16, None, 0.5, AdamConfig::classifier()),
            Task::Link => (32, Some(16), 0.0, AdamConfig::autoencoder()),
        };
        TrainConfig {
            level,
            hidden,
            latent,
            epochs: 200,
            seed: 0,
            dropout,
            adam,
            accumulate: Precision::Fp32,
            padding: true,
            pad_multiple: 8,
            memory_budget: None,
            fold_constants: true,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.unwrap_or((self.hidden / 2).max(1))
    }

    pub fn policy(&self) -> PrecisionPolicy {
        PrecisionPolicy::new(self.level).with_accumulate(self.accumulate)
    }
}

/// Glorot-uniform matrix in FP32, `U(-r, r)` with `r = sqrt(6 / (rows + cols))`.
pub fn glorot(
    acct: &MemoryAccountant,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> Result<PrecisionMatrix, TensorError> {
    let r = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-r..=r)).collect();
    PrecisionMatrix::from_f32(acct, rows, cols, data, Precision::Fp32)
}

#[derive(Default)]
struct Progress {
    loss_curve: Vec<f64>,
    stats: GemmStats,
    collapsed: bool,
    eval: Evaluation,
}

/// Trains from a fresh accountant and returns the run's record. Budget
/// exhaustion yields a record flagged `oom` rather than an error.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord, TrainError> {
    let acct = MemoryAccountant::with_budget(cfg.memory_budget);
    let mut progress = Progress::default();
    let start = Instant::now();
    let outcome = run(dataset, cfg, &acct, &mut progress);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let oom = match outcome {
        Ok(()) => false,
        Err(e) if e.is_oom() => true,
        Err(e) => return Err(e),
    };
    debug_assert_eq!(acct.live_bytes(), 0, "run leaked accounted bytes");

    let g = dataset.graph();
    Ok(RunRecord {
        task: dataset.task(),
        level: cfg.level,
        n: g.real_count(),
        d: cfg.hidden,
        features: g.features.is_some(),
        padding: cfg.padding,
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_loss: progress.loss_curve.last().copied().unwrap_or(f64::NAN),
        accuracy: progress.eval.accuracy,
        auc_roc: progress.eval.auc_roc,
        auc_pr: progress.eval.auc_pr,
        ap: progress.eval.ap,
        peak_bytes: acct.peak_bytes(),
        wall_ms,
        gemm_count: progress.stats.total,
        eligible_gemm_count: progress.stats.eligible,
        oom,
        collapsed: progress.collapsed,
        loss_curve: progress.loss_curve,
    })
}

fn run(dataset: &Dataset, cfg: &TrainConfig, acct: &MemoryAccountant, progress: &mut Progress) -> Result<(), TrainError> {
    if cfg.hidden == 0 || cfg.pad_multiple == 0 {
        return Err(TrainError::InvalidConfig("hidden width and pad multiple must be positive".into()));
    }
    let mut policy = cfg.policy();
    let problem = Problem::new(dataset, cfg, &policy, acct)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut params = Vec::with_capacity(2);
    for (i, &(rows, cols)) in problem.param_shapes().iter().enumerate() {
        let init = glorot(acct, rows, cols, &mut init_rng)?;
        params.push(ParamState::new(&format!("W{}", i + 1), &init, &policy)?);
    }
    let mut adam = Adam::new(cfg.adam);

    for _ in 0..cfg.epochs {
        let weights: Vec<Matrix> = params.iter().map(|p| p.working().clone()).collect();
        let scale = policy.loss_scale();
        let mut tape = problem.new_tape();
        // Fresh mask stream per epoch: padded rows come last, so their extra
        // draws cannot shift the masks of real rows in later epochs.
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(dropout_rng.gen());
        let fwd = problem.forward(&mut tape, &weights, Some((cfg.dropout, &mut epoch_rng)))?;
        let loss = tape.value(fwd.loss).get(0, 0) as f64;
        progress.loss_curve.push(loss);

        let grads = tape.backward(fwd.loss, scale)?;
        progress.stats.merge(tape.stats());
        let overflow = !loss.is_finite() || check_overflow(&grads);
        let skip = match policy.scaler.as_mut() {
            Some(scaler) => scaler.update(overflow),
            None if overflow => {
                progress.collapsed = true;
                break;
            }
            None => false,
        };
        if skip {
            continue;
        }
        let unscaled: Vec<Vec<f32>> = fwd
            .params
            .iter()
            .map(|&id| {
                grads
                    .unscaled(id)
                    .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
            })
            .collect();
        drop(grads);
        drop(tape);
        drop(weights);
        adam.step(&mut params, &unscaled)?;
    }
    if policy.scaler.is_some() && progress.loss_curve.last().is_some_and(|l| !l.is_finite()) {
        progress.collapsed = true;
    }

    let weights: Vec<Matrix> = params.iter().map(|p| Arc::clone(p.working())).collect();
    progress.eval = problem.evaluate(&weights)?;
    Ok(())
}
