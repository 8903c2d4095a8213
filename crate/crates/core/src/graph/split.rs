use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphError};

/// Vertex index sets for semi-supervised classification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VertexSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl VertexSplit {
    /// Boolean masks of length `n`, in train/val/test order.
    pub fn masks(&self, n: usize) -> [Vec<bool>; 3] {
        let mask = |idx: &[usize]| {
            let mut m = vec![false; n];
            for &i in idx {
                m[i] = true;
            }
            m
        };
        [mask(&self.train), mask(&self.val), mask(&self.test)]
    }
}

/// Held-out edges for link prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSplit {
    pub train_edges: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}

/// `per_class` training vertices for every class, then `val` validation
/// vertices and `test` test vertices (all remaining when `None`) from the
/// shuffled rest. Only labeled real vertices are eligible.
pub fn split_vertices(
    g: &Graph,
    per_class: usize,
    val: usize,
    test: Option<usize>,
    seed: u64,
) -> Result<VertexSplit, GraphError> {
    let labels = g.labels.as_ref().ok_or(GraphError::MissingLabels)?;
    let mut order: Vec<usize> = (0..g.n())
        .filter(|&v| g.pad_mask()[v] && labels[v].is_some())
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let classes = g.class_count();
    let mut taken = vec![0usize; classes];
    let mut train = Vec::with_capacity(per_class * classes);
    let mut rest = Vec::with_capacity(order.len());
    for v in order {
        let c = labels[v].expect("filtered to labeled vertices");
        if taken[c] < per_class {
            taken[c] += 1;
            train.push(v);
        } else {
            rest.push(v);
        }
    }
    if let Some((class, &have)) = taken.iter().enumerate().find(|(_, &t)| t < per_class) {
        return Err(GraphError::TooFewLabeled {
            class,
            have,
            need: per_class,
        });
    }
    let test_count = test.unwrap_or(rest.len().saturating_sub(val));
    if val + test_count > rest.len() {
        return Err(GraphError::TooFewVertices {
            have: rest.len(),
            need: val + test_count,
        });
    }
    let test = rest[val..val + test_count].to_vec();
    rest.truncate(val);
    Ok(VertexSplit {
        train,
        val: rest,
        test,
    })
}

/// Removes `floor(|E| * val_frac)` and `floor(|E| * test_frac)` edges as
/// positives and samples as many distinct non-edges for each.
pub fn split_edges(g: &Graph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit, GraphError> {
    for (what, value) in [("validation", val_frac), ("test", test_frac)] {
        if !(0.0..1.0).contains(&value) {
            return Err(GraphError::FractionOutOfRange { what, value });
        }
    }
    if val_frac + test_frac >= 1.0 {
        return Err(GraphError::FractionOutOfRange {
            what: "validation + test",
            value: val_frac + test_frac,
        });
    }
    let total = g.edge_count();
    let n_val = (total as f64 * val_frac).floor() as usize;
    let n_test = (total as f64 * test_frac).floor() as usize;

    let real: Vec<usize> = (0..g.n()).filter(|&v| g.pad_mask()[v]).collect();
    let r = real.len();
    let non_edges = r * r.saturating_sub(1) / 2 - total;
    if n_val + n_test > non_edges {
        return Err(GraphError::TooFewNonEdges {
            have: non_edges,
            need: n_val + n_test,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edges().to_vec();
    edges.shuffle(&mut rng);
    let test_pos = edges[..n_test].to_vec();
    let val_pos = edges[n_test..n_test + n_val].to_vec();
    let mut train_edges = edges[n_test + n_val..].to_vec();
    train_edges.sort_unstable();

    let existing = g.edge_set();
    let mut seen = HashSet::with_capacity(n_val + n_test);
    let mut negatives = Vec::with_capacity(n_val + n_test);
    while negatives.len() < n_val + n_test {
        let a = real[rng.gen_range(0..r)];
        let b = real[rng.gen_range(0..r)];
        let pair = (a.min(b), a.max(b));
        if a == b || existing.contains(&pair) || !seen.insert(pair) {
            continue;
        }
        negatives.push(pair);
    }
    let val_neg = negatives.split_off(n_test);
    Ok(EdgeSplit {
        train_edges,
        val_pos,
        val_neg,
        test_pos,
        test_neg: negatives,
    })
}
