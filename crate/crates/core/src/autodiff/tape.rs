//! Reverse-mode tape over [`PrecisionMatrix`] operations.
//!
//! Each recording method looks up the precision its op runs at, inserts casts
//! for inputs held at another precision (cached per tape, so a tensor is cast
//! at most once per forward pass) and stores the output. The backward pass
//! walks nodes in reverse; each adjoint is held at the precision of the
//! forward value it belongs to.
//!
//! Constants can carry a fold key. Casts and products built only from keyed
//! constants are looked up in a run-wide [`FoldCache`] instead of being
//! recomputed every iteration; cached tensors stay registered with the
//! accountant for the whole run.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use super::policy::{OpKind, OptLevel, PrecisionPolicy};
use super::AutodiffError;
use crate::tensor::{
    tensor_core_eligible, Allocation, GemmShape, Precision, PrecisionMatrix, Transpose,
};

pub type Matrix = Arc<PrecisionMatrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Run-wide store of constant subexpressions.
#[derive(Default)]
pub struct FoldCache {
    entries: HashMap<String, Matrix>,
}

impl FoldCache {
    pub fn new() -> FoldCache {
        FoldCache::default()
    }

    pub fn shared() -> Rc<RefCell<FoldCache>> {
        Rc::new(RefCell::new(FoldCache::new()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resident_bytes(&self) -> u64 {
        self.entries.values().map(|m| m.bytes()).sum()
    }
}

/// GEMMs executed on a tape, forward and backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GemmStats {
    pub total: u64,
    /// GEMMs satisfying the Tensor Core shape/precision rule.
    pub eligible: u64,
}

impl GemmStats {
    fn record(&mut self, shape: GemmShape, precision: Precision) {
        self.total += 1;
        if tensor_core_eligible(shape, precision) {
            self.eligible += 1;
        }
    }

    pub fn merge(&mut self, other: GemmStats) {
        self.total += other.total;
        self.eligible += other.eligible;
    }
}

enum Op {
    Param,
    Constant,
    Cast {
        input: NodeId,
    },
    MatMul {
        a: NodeId,
        ta: Transpose,
        b: NodeId,
        tb: Transpose,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f32>,
        _mask_bytes: Allocation,
    },
    Select {
        input: NodeId,
        rows: Arc<[usize]>,
        cols: Option<Arc<[usize]>>,
    },
    Sum {
        input: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        rows: Arc<[usize]>,
        labels: Arc<[usize]>,
        probs: PrecisionMatrix,
    },
    WeightedBce {
        probs: NodeId,
        target: Matrix,
        pos_weight: f32,
        norm: f32,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
    fold_key: Option<String>,
}

pub struct Tape {
    level: OptLevel,
    accumulate: Precision,
    nodes: Vec<Node>,
    cast_cache: HashMap<(NodeId, Precision), NodeId>,
    fold: Option<Rc<RefCell<FoldCache>>>,
    stats: GemmStats,
    backward_done: bool,
}

/// Scaled parameter gradients produced by [`Tape::backward`].
pub struct Gradients {
    entries: Vec<(NodeId, PrecisionMatrix)>,
    scale: f32,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&PrecisionMatrix> {
        self.entries.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &PrecisionMatrix)> {
        self.entries.iter().map(|(n, g)| (*n, g))
    }

    /// Gradient divided by the loss scale, computed in FP32.
    pub fn unscaled(&self, id: NodeId) -> Option<Vec<f32>> {
        let inv = 1.0 / self.scale;
        self.get(id)
            .map(|g| g.values().iter().map(|&x| x * inv).collect())
    }
}

/// True iff any gradient element is NaN or infinite.
pub fn check_overflow(grads: &Gradients) -> bool {
    grads.entries.iter().any(|(_, g)| g.has_non_finite())
}

fn flip(t: Transpose) -> Transpose {
    match t {
        Transpose::No => Transpose::Yes,
        Transpose::Yes => Transpose::No,
    }
}

fn logical_shape(a: &PrecisionMatrix, ta: Transpose, b: &PrecisionMatrix, tb: Transpose) -> GemmShape {
    let (m, k) = match ta {
        Transpose::No => (a.rows(), a.cols()),
        Transpose::Yes => (a.cols(), a.rows()),
    };
    let n = match tb {
        Transpose::No => b.cols(),
        Transpose::Yes => b.rows(),
    };
    GemmShape::new(m, k, n)
}

fn transpose_tag(t: Transpose) -> &'static str {
    match t {
        Transpose::No => "",
        Transpose::Yes => "^T",
    }
}

impl Tape {
    pub fn new(policy: &PrecisionPolicy) -> Tape {
        Tape {
            level: policy.level,
            accumulate: policy.accumulate,
            nodes: Vec::new(),
            cast_cache: HashMap::new(),
            fold: None,
            stats: GemmStats::default(),
            backward_done: false,
        }
    }

    pub fn with_fold_cache(mut self, cache: Rc<RefCell<FoldCache>>) -> Tape {
        self.fold = Some(cache);
        self
    }

    pub fn level(&self) -> OptLevel {
        self.level
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> GemmStats {
        self.stats
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn precision(&self, id: NodeId) -> Precision {
        self.nodes[id.0].value.precision()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool, fold_key: Option<String>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            fold_key,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulator for reductions and GEMMs running at `p`.
    fn accumulator(&self, p: Precision) -> Precision {
        match p {
            Precision::Fp32 => Precision::Fp32,
            Precision::Fp16 => self.accumulate,
        }
    }

    fn fold_lookup(&self, key: &str) -> Option<Matrix> {
        self.fold.as_ref()?.borrow().entries.get(key).cloned()
    }

    fn fold_insert(&self, key: &str, value: &Matrix) {
        if let Some(cache) = &self.fold {
            cache.borrow_mut().entries.insert(key.to_string(), value.clone());
        }
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Param, value, true, None)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false, None)
    }

    /// A constant whose derived casts and products may be folded across
    /// iterations under `key`.
    pub fn constant_keyed(&mut self, value: Matrix, key: &str) -> NodeId {
        self.push(Op::Constant, value, false, Some(key.to_string()))
    }

    pub fn cast(&mut self, input: NodeId, to: Precision) -> Result<NodeId, AutodiffError> {
        if self.precision(input) == to {
            return Ok(input);
        }
        if let Some(&hit) = self.cast_cache.get(&(input, to)) {
            return Ok(hit);
        }
        let requires_grad = self.requires_grad(input);
        let key = self.nodes[input.0]
            .fold_key
            .as_ref()
            .map(|k| format!("{k}@{to}"));
        let value = match key.as_deref().and_then(|k| self.fold_lookup(k)) {
            Some(cached) => cached,
            None => {
                let v = Arc::new(self.value(input).cast(to)?);
                if let Some(k) = &key {
                    self.fold_insert(k, &v);
                }
                v
            }
        };
        let id = self.push(Op::Cast { input }, value, requires_grad, key);
        self.cast_cache.insert((input, to), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.gemm(a, Transpose::No, b, Transpose::No)
    }

    /// `op(a) * op(b)` at the precision dispatched for GEMMs.
    pub fn gemm(
        &mut self,
        a: NodeId,
        ta: Transpose,
        b: NodeId,
        tb: Transpose,
    ) -> Result<NodeId, AutodiffError> {
        let p = super::policy::dispatch_precision(OpKind::MatMul, self.level);
        let a = self.cast(a, p)?;
        let b = self.cast(b, p)?;
        let acc = self.accumulator(p);
        let shape = logical_shape(self.value(a), ta, self.value(b), tb);
        let requires_grad = self.requires_grad(a) || self.requires_grad(b);
        let key = match (&self.nodes[a.0].fold_key, &self.nodes[b.0].fold_key) {
            (Some(ka), Some(kb)) if !requires_grad => Some(format!(
                "({ka}){}*({kb}){}+{acc}",
                transpose_tag(ta),
                transpose_tag(tb)
            )),
            _ => None,
        };
        let value = match key.as_deref().and_then(|k| self.fold_lookup(k)) {
            Some(cached) => cached,
            None => {
                let v = Arc::new(self.value(a).gemm(ta, self.value(b), tb, acc)?);
                if let Some(k) = &key {
                    self.fold_insert(k, &v);
                }
                v
            }
        };
        self.stats.record(shape, p);
        Ok(self.push(Op::MatMul { a, ta, b, tb }, value, requires_grad, key))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let p = super::policy::dispatch_precision(OpKind::Add, self.level);
        let a = self.cast(a, p)?;
        let b = self.cast(b, p)?;
        let value = Arc::new(self.value(a).add(self.value(b))?);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add { a, b }, value, rg, None))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let p = super::policy::dispatch_precision(OpKind::Relu, self.level);
        let input = self.cast(input, p)?;
        let value = Arc::new(self.value(input).pointwise(crate::tensor::Pointwise::Relu)?);
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Relu { input }, value, rg, None))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let p = super::policy::dispatch_precision(OpKind::Sigmoid, self.level);
        let input = self.cast(input, p)?;
        let value = Arc::new(self.value(input).pointwise(crate::tensor::Pointwise::Sigmoid)?);
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Sigmoid { input }, value, rg, None))
    }

    /// Inverted dropout at the input's precision. The keep mask is drawn in
    /// row-major order from `rng` and accounted at one byte per element.
    pub fn dropout<R: Rng>(&mut self, input: NodeId, rate: f32, rng: &mut R) -> Result<NodeId, AutodiffError> {
        if rate <= 0.0 {
            return Ok(input);
        }
        let x = self.value(input).clone();
        let mask_bytes = x.accountant().reserve(x.len() as u64)?;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.gen::<f32>() >= rate { keep } else { 0.0 })
            .collect();
        let data: Vec<f32> = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Arc::new(x.new_like(x.rows(), x.cols(), data, x.precision())?);
        let rg = self.requires_grad(input);
        Ok(self.push(
            Op::Dropout {
                input,
                mask,
                _mask_bytes: mask_bytes,
            },
            value,
            rg,
            None,
        ))
    }

    /// Keeps the listed rows (and columns, when given).
    pub fn select(
        &mut self,
        input: NodeId,
        rows: Arc<[usize]>,
        cols: Option<Arc<[usize]>>,
    ) -> Result<NodeId, AutodiffError> {
        let value = Arc::new(self.value(input).select(&rows, cols.as_deref())?);
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Select { input, rows, cols }, value, rg, None))
    }

    /// Sum of all elements as a 1x1 matrix.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let p = super::policy::dispatch_precision(OpKind::Sum, self.level);
        let input = self.cast(input, p)?;
        let x = self.value(input).clone();
        let p = x.precision();
        let acc = self.accumulator(p);
        let total = x.values().iter().fold(0.0f32, |s, &v| acc.round(s + v));
        let value = Arc::new(x.new_like(1, 1, vec![p.round(total)], p)?);
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Sum { input }, value, rg, None))
    }

    /// Mean negative log-softmax probability of `labels[i]` at logit row
    /// `rows[i]`.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        rows: Arc<[usize]>,
        labels: Arc<[usize]>,
    ) -> Result<NodeId, AutodiffError> {
        if rows.is_empty() {
            return Err(AutodiffError::EmptyMask);
        }
        assert_eq!(rows.len(), labels.len(), "one label per selected row");
        let p = super::policy::dispatch_precision(OpKind::SoftmaxXent, self.level);
        let logits = self.cast(logits, p)?;
        let acc = self.accumulator(p);
        let x = self.value(logits).clone();
        let classes = x.cols();
        let values = x.values();

        let mut probs = vec![0.0f32; rows.len() * classes];
        let mut total = 0.0f32;
        for (i, (&row, &label)) in rows.iter().zip(labels.iter()).enumerate() {
            let xs = &values[row * classes..(row + 1) * classes];
            let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let shifted: Vec<f32> = xs.iter().map(|&v| p.round(v - max)).collect();
            let exps: Vec<f32> = shifted.iter().map(|&s| p.round(s.exp())).collect();
            let sum = p.round(exps.iter().fold(0.0f32, |a, &e| acc.round(a + e)));
            let log_sum = p.round(sum.ln());
            let loss = p.round(log_sum - shifted[label]);
            total = acc.round(total + loss);
            for (j, &e) in exps.iter().enumerate() {
                probs[i * classes + j] = p.round(e / sum);
            }
        }
        let mean = p.round(total / rows.len() as f32);
        let probs = x.new_like(rows.len(), classes, probs, p)?;
        let value = Arc::new(x.new_like(1, 1, vec![mean], p)?);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                rows,
                labels,
                probs,
            },
            value,
            rg,
            None,
        ))
    }

    /// `norm * mean(-(pos_weight * y * log p + (1 - y) * log(1 - p)))` over a
    /// 0/1 target, logs clamped at -100.
    pub fn weighted_bce(
        &mut self,
        probs: NodeId,
        target: Matrix,
        pos_weight: f32,
        norm: f32,
    ) -> Result<NodeId, AutodiffError> {
        let p = super::policy::dispatch_precision(OpKind::Bce, self.level);
        let probs = self.cast(probs, p)?;
        let x = self.value(probs).clone();
        if x.shape() != target.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "weighted_bce",
                left: x.shape(),
                right: target.shape(),
            }
            .into());
        }
        let acc = self.accumulator(p);
        let pw = p.round(pos_weight);
        let clamped_log = |v: f32| p.round(v.ln()).max(-100.0);
        let (xv, tv) = (x.values(), target.values());
        let mut total = 0.0f32;
        for (&pr, &t) in xv.iter().zip(tv.iter()) {
            let term = if t > 0.5 {
                p.round(-pw * clamped_log(pr))
            } else {
                p.round(-clamped_log(p.round(1.0 - pr)))
            };
            total = acc.round(total + term);
        }
        let mean = p.round(p.round(total / xv.len() as f32) * p.round(norm));
        let value = Arc::new(x.new_like(1, 1, vec![mean], p)?);
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Op::WeightedBce {
                probs,
                target,
                pos_weight,
                norm,
            },
            value,
            rg,
            None,
        ))
    }

    /// Reverse pass seeded with `d(loss * scale) / d(loss) = scale`.
    ///
    /// Returned gradients are still multiplied by `scale`; see
    /// [`Gradients::unscaled`].
    pub fn backward(&mut self, loss: NodeId, scale: f32) -> Result<Gradients, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let loss_value = self.value(loss).clone();
        if loss_value.shape() != (1, 1) {
            return Err(AutodiffError::NotScalar {
                shape: loss_value.shape(),
            });
        }
        self.backward_done = true;

        let mut adjoints: Vec<Option<PrecisionMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let p = loss_value.precision();
        adjoints[loss.0] = Some(loss_value.new_like(1, 1, vec![p.round(scale)], p)?);
        let mut grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Param) {
                grads.push((NodeId(idx), adj));
                continue;
            }
            for (target, contribution) in self.input_adjoints(idx, &adj)? {
                accumulate(&mut adjoints, target, contribution)?;
            }
        }
        grads.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            entries: grads,
            scale,
        })
    }

    fn input_adjoints(
        &mut self,
        idx: usize,
        adj: &PrecisionMatrix,
    ) -> Result<Vec<(NodeId, PrecisionMatrix)>, AutodiffError> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Cast { input } => {
                let to = self.precision(*input);
                out.push((*input, adj.cast(to)?));
            }
            &Op::MatMul { a, ta, b, tb } => {
                let p = adj.precision();
                let acc = self.accumulator(p);
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                let mut shapes = Vec::with_capacity(2);
                if self.requires_grad(a) {
                    let da = match ta {
                        Transpose::No => {
                            shapes.push(logical_shape(adj, Transpose::No, &bv, flip(tb)));
                            adj.gemm(Transpose::No, &bv, flip(tb), acc)?
                        }
                        Transpose::Yes => {
                            shapes.push(logical_shape(&bv, tb, adj, Transpose::Yes));
                            bv.gemm(tb, adj, Transpose::Yes, acc)?
                        }
                    };
                    out.push((a, da));
                }
                if self.requires_grad(b) {
                    let db = match tb {
                        Transpose::No => {
                            shapes.push(logical_shape(&av, flip(ta), adj, Transpose::No));
                            av.gemm(flip(ta), adj, Transpose::No, acc)?
                        }
                        Transpose::Yes => {
                            shapes.push(logical_shape(adj, Transpose::Yes, &av, ta));
                            adj.gemm(Transpose::Yes, &av, ta, acc)?
                        }
                    };
                    out.push((b, db));
                }
                for s in shapes {
                    self.stats.record(s, p);
                }
            }
            &Op::Add { a, b } => {
                if self.requires_grad(a) {
                    out.push((a, adj.try_clone()?));
                }
                if self.requires_grad(b) {
                    out.push((b, adj.try_clone()?));
                }
            }
            &Op::Relu { input } => {
                let y = &node.value;
                let d = adj.zip_map(y, "relu_backward", |g, v| if v > 0.0 { g } else { 0.0 })?;
                out.push((input, d));
            }
            &Op::Sigmoid { input } => {
                let p = adj.precision();
                let s = &node.value;
                let d = adj.zip_map(s, "sigmoid_backward", |g, v| {
                    p.round(g * p.round(v * p.round(1.0 - v)))
                })?;
                out.push((input, d));
            }
            Op::Dropout { input, mask, .. } => {
                let p = adj.precision();
                let data: Vec<f32> = adj.values().iter().zip(mask).map(|(&g, &m)| p.round(g * m)).collect();
                out.push((*input, adj.new_like(adj.rows(), adj.cols(), data, p)?));
            }
            Op::Select { input, rows, cols } => {
                let (r, c) = self.value(*input).shape();
                out.push((*input, adj.scatter(r, c, rows, cols.as_deref())?));
            }
            &Op::Sum { input } => {
                let x = self.value(input);
                let g = adj.get(0, 0);
                out.push((input, x.new_like(x.rows(), x.cols(), vec![g; x.len()], adj.precision())?));
            }
            Op::SoftmaxXent {
                logits,
                rows,
                labels,
                probs,
            } => {
                let p = adj.precision();
                let x = self.value(*logits);
                let classes = x.cols();
                let coef = p.round(adj.get(0, 0) / rows.len() as f32);
                let pv = probs.values();
                let mut data = vec![0.0f32; x.len()];
                for (i, (&row, &label)) in rows.iter().zip(labels.iter()).enumerate() {
                    for j in 0..classes {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        let diff = p.round(pv[i * classes + j] - onehot);
                        data[row * classes + j] = p.round(diff * coef);
                    }
                }
                out.push((*logits, x.new_like(x.rows(), classes, data, p)?));
            }
            Op::WeightedBce {
                probs,
                target,
                pos_weight,
                norm,
            } => {
                let p = adj.precision();
                let x = self.value(*probs);
                let pw = p.round(*pos_weight);
                let eps = p.round(1e-12);
                let coef = p.round(p.round(adj.get(0, 0) * p.round(*norm)) / x.len() as f32);
                let (xv, tv) = (x.values(), target.values());
                let data: Vec<f32> = xv
                    .iter()
                    .zip(tv.iter())
                    .map(|(&pr, &t)| {
                        let local = if t > 0.5 {
                            p.round(-pw / pr.max(eps))
                        } else {
                            p.round(1.0 / p.round(1.0 - pr).max(eps))
                        };
                        p.round(local * coef)
                    })
                    .collect();
                out.push((*probs, x.new_like(x.rows(), x.cols(), data, p)?));
            }
        }
        out.retain(|(id, _)| self.requires_grad(*id));
        Ok(out)
    }
}

fn accumulate(
    adjoints: &mut [Option<PrecisionMatrix>],
    target: NodeId,
    contribution: PrecisionMatrix,
) -> Result<(), AutodiffError> {
    let slot = &mut adjoints[target.0];
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&contribution)?,
        None => contribution,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::halfnum;
    use crate::tensor::MemoryAccountant;

    fn m(acct: &MemoryAccountant, rows: usize, cols: usize, data: &[f32], p: Precision) -> Matrix {
        Arc::new(PrecisionMatrix::from_f32(acct, rows, cols, data.to_vec(), p).unwrap())
    }

    #[test]
    fn sum_of_weights_has_unit_gradient() {
        let acct = MemoryAccountant::new();
        let mut tape = Tape::new(&PrecisionPolicy::new(OptLevel::O0));
        let w = tape.param(m(&acct, 2, 3, &[0.5, -1.0, 2.0, 3.0, 0.0, 1.0], Precision::Fp32));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss, 1.0).unwrap();
        assert_eq!(grads.unscaled(w).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn double_backward_and_non_scalar_rejected() {
        let acct = MemoryAccountant::new();
        let mut tape = Tape::new(&PrecisionPolicy::new(OptLevel::O0));
        assert!(matches!(tape.backward(NodeId(0), 1.0), Err(AutodiffError::BackwardBeforeForward)));
        let w = tape.param(m(&acct, 1, 2, &[1.0, 2.0], Precision::Fp32));
        assert!(matches!(tape.backward(w, 1.0), Err(AutodiffError::NotScalar { .. })));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, 1.0).unwrap();
        assert!(matches!(tape.backward(loss, 1.0), Err(AutodiffError::DoubleBackward)));
    }

    /// `2^-13 * w * 2^-13`: the weight gradient is 2^-26, below the smallest
    /// binary16 subnormal unless the loss is scaled. The scale enters the FP16
    /// region unattenuated here, so it must stay below 65504.
    fn tiny_gradient(level: OptLevel, scale: f32) -> f32 {
        let acct = MemoryAccountant::new();
        let policy = PrecisionPolicy::new(level);
        let mut tape = Tape::new(&policy);
        let small = 2f32.powi(-13);
        let a = tape.constant(m(&acct, 1, 1, &[small], policy.input_precision()));
        let b = tape.constant(m(&acct, 1, 1, &[small], policy.input_precision()));
        let w = tape.param(m(&acct, 1, 1, &[1.0], policy.weight_precision()));
        let aw = tape.matmul(a, w).unwrap();
        let awb = tape.matmul(aw, b).unwrap();
        let loss = tape.sum(awb).unwrap();
        let grads = tape.backward(loss, scale).unwrap();
        grads.unscaled(w).unwrap()[0]
    }

    #[test]
    fn loss_scaling_rescues_underflowing_gradient() {
        let target = 2f32.powi(-26);
        assert_eq!(tiny_gradient(OptLevel::O3, 1.0), 0.0);
        assert_eq!(tiny_gradient(OptLevel::O1, 32768.0), target);
        assert_eq!(tiny_gradient(OptLevel::O2, 32768.0), target);
        assert!(tiny_gradient(OptLevel::O1, 65536.0).is_infinite());
        assert_eq!(tiny_gradient(OptLevel::O0, 1.0), target);
        // The scaled value itself is an ordinary binary16 normal.
        assert_eq!(halfnum::round_to_half(target * 65536.0), 2f32.powi(-10));
    }

    #[test]
    fn overflow_detection() {
        let acct = MemoryAccountant::new();
        let policy = PrecisionPolicy::new(OptLevel::O3);
        let mut tape = Tape::new(&policy);
        let x = tape.constant(m(&acct, 1, 1, &[300.0], Precision::Fp16));
        let w = tape.param(m(&acct, 1, 1, &[1.0], Precision::Fp16));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        // d/dw = 300 * 300 overflows binary16.
        let grads = tape.backward(loss, 300.0).unwrap();
        assert!(check_overflow(&grads));

        let mut tape = Tape::new(&policy);
        let x = tape.constant(m(&acct, 1, 1, &[3.0], Precision::Fp16));
        let w = tape.param(m(&acct, 1, 1, &[1.0], Precision::Fp16));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        assert!(!check_overflow(&tape.backward(loss, 1.0).unwrap()));
    }

    #[test]
    fn o1_casts_matmul_inputs_once_per_tape() {
        let acct = MemoryAccountant::new();
        let mut tape = Tape::new(&PrecisionPolicy::new(OptLevel::O1));
        let a = tape.constant(m(&acct, 2, 2, &[1.0, 0.0, 0.0, 1.0], Precision::Fp32));
        let w = tape.param(m(&acct, 2, 2, &[1.0, 2.0, 3.0, 4.0], Precision::Fp32));
        let y1 = tape.matmul(a, w).unwrap();
        let y2 = tape.matmul(a, w).unwrap();
        assert_eq!(tape.precision(y1), Precision::Fp16);
        // Two leaves + two casts + two products.
        assert_eq!(tape.len(), 6);
        let r = tape.relu(y2).unwrap();
        assert_eq!(tape.precision(r), Precision::Fp32);
        assert_eq!(tape.stats().total, 2);
    }

    #[test]
    fn fold_cache_reuses_constant_products() {
        let acct = MemoryAccountant::new();
        let cache = FoldCache::shared();
        let policy = PrecisionPolicy::new(OptLevel::O1);
        let adj = m(&acct, 8, 8, &[0.5; 64], Precision::Fp32);
        let feats = m(&acct, 8, 8, &[0.25; 64], Precision::Fp32);
        let mut first = None;
        for _ in 0..3 {
            let mut tape = Tape::new(&policy).with_fold_cache(cache.clone());
            let a = tape.constant_keyed(adj.clone(), "adj");
            let x = tape.constant_keyed(feats.clone(), "x");
            let p = tape.matmul(a, x).unwrap();
            assert_eq!(tape.stats(), GemmStats { total: 1, eligible: 1 });
            let ptr = Arc::as_ptr(tape.value(p));
            assert_eq!(*first.get_or_insert(ptr), ptr);
        }
        // fp16 casts of both inputs and the product.
        assert_eq!(cache.borrow().len(), 3);
        assert_eq!(cache.borrow().resident_bytes(), 3 * 64 * 2);
    }

    #[test]
    fn softmax_xent_uniform_and_margin() {
        let acct = MemoryAccountant::new();
        let mut tape = Tape::new(&PrecisionPolicy::new(OptLevel::O0));
        let logits = tape.param(m(&acct, 2, 3, &[0.0; 6], Precision::Fp32));
        let loss = tape
            .softmax_xent(logits, Arc::from(vec![0, 1]), Arc::from(vec![2, 0]))
            .unwrap();
        assert!((tape.value(loss).get(0, 0) - 3f32.ln()).abs() < 1e-6);

        let mut tape = Tape::new(&PrecisionPolicy::new(OptLevel::O0));
        let logits = tape.param(m(&acct, 1, 2, &[30.0, 0.0], Precision::Fp32));
        let loss = tape.softmax_xent(logits, Arc::from(vec![0]), Arc::from(vec![0])).unwrap();
        // ln(1 + e^-30) ~ 9.4e-14
        assert!(tape.value(loss).get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        use rand::SeedableRng;
        let acct = MemoryAccountant::new();
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::new(&PrecisionPolicy::new(OptLevel::O0));
            let x = tape.param(m(&acct, 4, 4, &[1.0; 16], Precision::Fp32));
            let y = tape.dropout(x, 0.5, &mut rng).unwrap();
            tape.value(y).to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
