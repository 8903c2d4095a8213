use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Dataset, TrainConfig, TrainError};
use crate::autodiff::{FoldCache, Matrix, NodeId, PrecisionPolicy, Tape};
use crate::graph::{self, Graph};
use crate::metrics::{self, Task};
use crate::tensor::{MemoryAccountant, Precision, PrecisionMatrix, Transpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `act((adj * h) * w)` recorded on `tape`. `adj` must be symmetric; it is
/// read through its transpose, which the GEMM kernel packs faster.
pub fn gcn_layer(
    tape: &mut Tape,
    h: NodeId,
    adj: NodeId,
    w: NodeId,
    activation: Activation,
) -> Result<NodeId, TrainError> {
    let ah = tape.gemm(adj, Transpose::Yes, h, Transpose::No)?;
    let z = tape.matmul(ah, w)?;
    Ok(match activation {
        Activation::Relu => tape.relu(z)?,
        Activation::Identity => z,
    })
}

/// Nodes produced by one recorded forward pass.
pub struct Forward {
    pub loss: NodeId,
    pub params: Vec<NodeId>,
    /// Stripped logits for classification, unstripped embeddings `Z` for
    /// link prediction.
    pub output: NodeId,
}

/// Evaluation results for one model state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub accuracy: Option<f64>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub ap: Option<f64>,
}

enum Objective {
    Classify {
        rows: Arc<[usize]>,
        labels: Arc<[usize]>,
        test_rows: Vec<usize>,
        test_labels: Vec<usize>,
        classes: usize,
    },
    Link {
        target: Matrix,
        pos_weight: f32,
        norm: f32,
        test_pairs: Vec<(usize, usize)>,
        test_truth: Vec<bool>,
    },
}

/// Run-resident tensors for one dataset under one policy.
pub struct Problem {
    policy: PrecisionPolicy,
    adj: Matrix,
    x: Matrix,
    /// Real-vertex indices, present only when the graph is padded.
    real: Option<Arc<[usize]>>,
    objective: Objective,
    shapes: [(usize, usize); 2],
    fold: Option<Rc<RefCell<FoldCache>>>,
}

fn at_precision(m: PrecisionMatrix, p: Precision) -> Result<Matrix, TrainError> {
    Ok(Arc::new(if m.precision() == p { m } else { m.cast(p)? }))
}

impl Problem {
    pub fn new(
        dataset: &Dataset,
        cfg: &TrainConfig,
        policy: &PrecisionPolicy,
        acct: &MemoryAccountant,
    ) -> Result<Problem, TrainError> {
        let base = dataset.encoder_graph();
        let g: Graph = if cfg.padding {
            graph::pad_to_multiple(base, cfg.pad_multiple)
        } else {
            base.clone()
        };
        let ip = policy.input_precision();
        let adj = at_precision(graph::normalize_adjacency(&g, acct)?, ip)?;
        let x = at_precision(graph::feature_matrix(&g, acct, Precision::Fp32)?, ip)?;
        let real = g.is_padded().then(|| Arc::from(graph::real_indices(g.pad_mask())));

        let (objective, out_dim) = match dataset {
            Dataset::Classify { graph, split } => {
                let labels = graph.labels.as_ref().ok_or(graph::GraphError::MissingLabels)?;
                let pick = |idx: &[usize]| -> Result<Vec<usize>, TrainError> {
                    idx.iter()
                        .map(|&v| labels[v].ok_or(TrainError::InvalidConfig(format!("vertex {v} has no label"))))
                        .collect()
                };
                if split.train.is_empty() {
                    return Err(crate::autodiff::AutodiffError::EmptyMask.into());
                }
                let classes = graph.class_count();
                (
                    Objective::Classify {
                        rows: Arc::from(split.train.clone()),
                        labels: Arc::from(pick(&split.train)?),
                        test_labels: pick(&split.test)?,
                        test_rows: split.test.clone(),
                        classes,
                    },
                    classes,
                )
            }
            Dataset::Link { train_graph, split, .. } => {
                let target = graph::reconstruction_target(train_graph, acct)?;
                let total = (target.rows() * target.cols()) as f64;
                let positives = target.values().iter().filter(|&&v| v > 0.5).count() as f64;
                if positives == 0.0 {
                    return Err(TrainError::InvalidConfig("reconstruction target has no positives".into()));
                }
                let negatives = total - positives;
                let mut test_pairs = split.test_pos.clone();
                test_pairs.extend_from_slice(&split.test_neg);
                let mut test_truth = vec![true; split.test_pos.len()];
                test_truth.resize(test_pairs.len(), false);
                (
                    Objective::Link {
                        target: at_precision(target, ip)?,
                        pos_weight: (negatives / positives) as f32,
                        norm: (total / (2.0 * negatives)) as f32,
                        test_pairs,
                        test_truth,
                    },
                    cfg.latent_dim(),
                )
            }
        };
        Ok(Problem {
            policy: policy.clone(),
            shapes: [(x.cols(), cfg.hidden), (cfg.hidden, out_dim)],
            adj,
            x,
            real,
            objective,
            fold: cfg.fold_constants.then(FoldCache::shared),
        })
    }

    pub fn policy(&self) -> &PrecisionPolicy {
        &self.policy
    }

    /// Shapes of `W1` and `W2`.
    pub fn param_shapes(&self) -> [(usize, usize); 2] {
        self.shapes
    }

    pub fn task(&self) -> Task {
        match self.objective {
            Objective::Classify { .. } => Task::Classify,
            Objective::Link { .. } => Task::Link,
        }
    }

    pub fn new_tape(&self) -> Tape {
        let tape = Tape::new(&self.policy);
        match &self.fold {
            Some(cache) => tape.with_fold_cache(cache.clone()),
            None => tape,
        }
    }

    /// Records forward pass and loss. Dropout applies to the classifier's
    /// hidden layer when `dropout` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        weights: &[Matrix],
        dropout: Option<(f32, &mut ChaCha8Rng)>,
    ) -> Result<Forward, TrainError> {
        let adj = tape.constant_keyed(self.adj.clone(), "adj");
        let x = tape.constant_keyed(self.x.clone(), "x");
        let params: Vec<NodeId> = weights.iter().map(|w| tape.param(w.clone())).collect();
        let mut h = gcn_layer(tape, x, adj, params[0], Activation::Relu)?;
        if let (Objective::Classify { .. }, Some((rate, rng))) = (&self.objective, dropout) {
            h = tape.dropout(h, rate, rng)?;
        }
        let out = gcn_layer(tape, h, adj, params[1], Activation::Identity)?;

        let (loss, output) = match &self.objective {
            Objective::Classify { rows, labels, .. } => {
                let logits = match &self.real {
                    Some(real) => tape.select(out, real.clone(), None)?,
                    None => out,
                };
                (tape.softmax_xent(logits, rows.clone(), labels.clone())?, logits)
            }
            Objective::Link {
                target,
                pos_weight,
                norm,
                ..
            } => {
                let zz = tape.gemm(out, Transpose::No, out, Transpose::Yes)?;
                let probs = tape.sigmoid(zz)?;
                let probs = match &self.real {
                    Some(real) => tape.select(probs, real.clone(), Some(real.clone()))?,
                    None => probs,
                };
                (tape.weighted_bce(probs, target.clone(), *pos_weight, *norm)?, out)
            }
        };
        Ok(Forward { loss, params, output })
    }

    /// Test-split metrics for the given working weights, without dropout.
    pub fn evaluate(&self, weights: &[Matrix]) -> Result<Evaluation, TrainError> {
        let mut tape = self.new_tape();
        let fwd = self.forward(&mut tape, weights, None)?;
        let out = tape.value(fwd.output);
        Ok(match &self.objective {
            Objective::Classify {
                test_rows,
                test_labels,
                classes,
                ..
            } => {
                debug_assert_eq!(out.cols(), *classes);
                Evaluation {
                    accuracy: if test_rows.is_empty() {
                        None
                    } else {
                        Some(metrics::accuracy(out, test_rows, test_labels)?)
                    },
                    ..Evaluation::default()
                }
            }
            Objective::Link {
                test_pairs,
                test_truth,
                ..
            } => {
                let z = out.values();
                let k = out.cols();
                let scores: Vec<f32> = test_pairs
                    .iter()
                    .map(|&(u, v)| {
                        let dot: f32 = (0..k).map(|j| z[u * k + j] * z[v * k + j]).sum();
                        crate::tensor::sigmoid(dot)
                    })
                    .collect();
                Evaluation {
                    auc_roc: Some(metrics::roc_auc(&scores, test_truth)?),
                    auc_pr: Some(metrics::pr_auc(&scores, test_truth)?),
                    ap: Some(metrics::average_precision(&scores, test_truth)?),
                    ..Evaluation::default()
                }
            }
        })
    }
}
