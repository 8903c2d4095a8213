//! Undirected graphs, adjacency normalization, padding and dataset IO.

mod generate;
mod io;
mod split;

pub use generate::barabasi_albert;
pub use io::{load_graph, save_graph, EDGES_FILE, FEATURES_FILE, LABELS_FILE, META_FILE};
pub use split::{split_edges, split_vertices, EdgeSplit, VertexSplit};

use std::collections::{HashSet, VecDeque};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{MemoryAccountant, Precision, PrecisionMatrix, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("edge ({u}, {v}) has an endpoint outside 0..{n}")]
    EdgeOutOfRange { u: usize, v: usize, n: usize },
    #[error("self-loop at vertex {0}")]
    SelfLoop(usize),
    #[error("attachment count m={m} must satisfy 1 <= m < n={n}")]
    InvalidAttachment { n: usize, m: usize },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what} fraction {value} is outside [0, 1)")]
    FractionOutOfRange { what: &'static str, value: f64 },
    #[error("class {class} has {have} labeled vertices, {need} required")]
    TooFewLabeled { class: usize, have: usize, need: usize },
    #[error("requested {need} vertices for validation/test but only {have} remain")]
    TooFewVertices { have: usize, need: usize },
    #[error("graph has {have} non-edges, {need} negatives requested")]
    TooFewNonEdges { have: usize, need: usize },
    #[error("graph has no labels")]
    MissingLabels,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dense row-major FP32 vertex features, independent of any accountant.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    pub features: Option<Features>,
    /// One entry per vertex; padded vertices carry `None`.
    pub labels: Option<Vec<Option<usize>>>,
    pub split: Option<VertexSplit>,
    pad_mask: Vec<bool>,
}

impl Graph {
    /// Builds a graph from unordered pairs. Duplicates collapse; pairs are
    /// stored as `(min, max)` in sorted order.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Graph, GraphError> {
        let mut set = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::EdgeOutOfRange { u, v, n });
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            set.push((u.min(v), u.max(v)));
        }
        set.sort_unstable();
        set.dedup();
        Ok(Graph {
            n,
            edges: set,
            features: None,
            labels: None,
            split: None,
            pad_mask: vec![true; n],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    /// Vertices that are not padding.
    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&r| r).count()
    }

    pub fn is_padded(&self) -> bool {
        self.real_count() != self.n
    }

    pub fn with_features(mut self, features: Features) -> Result<Graph, GraphError> {
        if features.rows != self.n {
            return Err(GraphError::LengthMismatch {
                what: "feature rows",
                expected: self.n,
                got: features.rows,
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Graph, GraphError> {
        if labels.len() != self.n {
            return Err(GraphError::LengthMismatch {
                what: "labels",
                expected: self.n,
                got: labels.len(),
            });
        }
        self.labels = Some(labels.into_iter().map(Some).collect());
        Ok(self)
    }

    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().flatten().max().map(|&c| c + 1))
            .unwrap_or(0)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn edge_set(&self) -> HashSet<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    /// Same vertices and metadata, different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Graph, GraphError> {
        let mut g = Graph::new(self.n, edges.iter().copied())?;
        g.features = self.features.clone();
        g.labels = self.labels.clone();
        g.split = self.split.clone();
        g.pad_mask = self.pad_mask.clone();
        Ok(g)
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`, as a dense
/// FP32 matrix. Isolated vertices get a unit diagonal.
pub fn normalize_adjacency(g: &Graph, acct: &MemoryAccountant) -> Result<PrecisionMatrix, GraphError> {
    let n = g.n();
    let inv_sqrt: Vec<f64> = g.degrees().iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        data[i * n + i] = (inv_sqrt[i] * inv_sqrt[i]) as f32;
    }
    for &(u, v) in g.edges() {
        let w = (inv_sqrt[u] * inv_sqrt[v]) as f32;
        data[u * n + v] = w;
        data[v * n + u] = w;
    }
    Ok(PrecisionMatrix::from_f32(acct, n, n, data, Precision::Fp32)?)
}

/// Dense `A + I` over the real vertices only, the auto-encoder target.
pub fn reconstruction_target(g: &Graph, acct: &MemoryAccountant) -> Result<PrecisionMatrix, GraphError> {
    let real = real_indices(g.pad_mask());
    let mut position = vec![usize::MAX; g.n()];
    for (i, &v) in real.iter().enumerate() {
        position[v] = i;
    }
    let r = real.len();
    let mut data = vec![0.0f32; r * r];
    for i in 0..r {
        data[i * r + i] = 1.0;
    }
    for &(u, v) in g.edges() {
        let (pu, pv) = (position[u], position[v]);
        data[pu * r + pv] = 1.0;
        data[pv * r + pu] = 1.0;
    }
    Ok(PrecisionMatrix::from_f32(acct, r, r, data, Precision::Fp32)?)
}

/// Appends isolated, unlabeled, zero-feature vertices until `n` is a
/// multiple of `k`.
pub fn pad_to_multiple(g: &Graph, k: usize) -> Graph {
    assert!(k > 0, "padding multiple must be positive");
    let target = g.n().div_ceil(k) * k;
    let extra = target - g.n();
    let mut out = g.clone();
    if extra == 0 {
        return out;
    }
    out.n = target;
    out.pad_mask.extend(std::iter::repeat(false).take(extra));
    if let Some(f) = &mut out.features {
        f.data.extend(std::iter::repeat(0.0).take(extra * f.cols));
        f.rows = target;
    }
    if let Some(labels) = &mut out.labels {
        labels.extend(std::iter::repeat(None).take(extra));
    }
    out
}

/// Indices of `true` entries in a padding mask.
pub fn real_indices(pad_mask: &[bool]) -> Vec<usize> {
    pad_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &real)| real.then_some(i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripAxes {
    Rows,
    /// Rows and columns, for vertex-by-vertex outputs.
    RowsAndCols,
}

pub fn strip_padding(
    m: &PrecisionMatrix,
    pad_mask: &[bool],
    axes: StripAxes,
) -> Result<PrecisionMatrix, GraphError> {
    if m.rows() != pad_mask.len() {
        return Err(GraphError::LengthMismatch {
            what: "pad mask vs rows",
            expected: m.rows(),
            got: pad_mask.len(),
        });
    }
    let keep = real_indices(pad_mask);
    let cols = match axes {
        StripAxes::Rows => None,
        StripAxes::RowsAndCols => {
            if m.cols() != pad_mask.len() {
                return Err(GraphError::LengthMismatch {
                    what: "pad mask vs cols",
                    expected: m.cols(),
                    got: pad_mask.len(),
                });
            }
            Some(keep.as_slice())
        }
    };
    Ok(m.select(&keep, cols)?)
}

/// Input features at `precision`, or `[I; 0]` over the real vertices when the
/// graph carries none.
pub fn feature_matrix(
    g: &Graph,
    acct: &MemoryAccountant,
    precision: Precision,
) -> Result<PrecisionMatrix, GraphError> {
    match &g.features {
        Some(f) => Ok(PrecisionMatrix::from_f32(acct, f.rows, f.cols, f.data.clone(), precision)?),
        None => {
            let real = real_indices(g.pad_mask());
            let cols = real.len();
            let mut data = vec![0.0f32; g.n() * cols];
            for (j, &v) in real.iter().enumerate() {
                data[v * cols + j] = 1.0;
            }
            Ok(PrecisionMatrix::from_f32(acct, g.n(), cols, data, precision)?)
        }
    }
}

/// Parity of the BFS distance from vertex 0; unreachable vertices get 0.
pub fn hub_parity_labels(g: &Graph) -> Vec<usize> {
    let adj = g.neighbors();
    let mut dist = vec![usize::MAX; g.n()];
    let mut queue = VecDeque::new();
    if g.n() > 0 {
        dist[0] = 0;
        queue.push_back(0);
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist.iter().map(|&d| if d == usize::MAX { 0 } else { d % 2 }).collect()
}

/// Sparse binary features: each entry is 1 with probability `density`.
pub fn random_features(rows: usize, cols: usize, density: f64, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
        .collect();
    Features { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let acct = MemoryAccountant::new();
        let single = Graph::new(1, []).unwrap();
        assert_eq!(normalize_adjacency(&single, &acct).unwrap().to_vec(), vec![1.0]);
        let pair = Graph::new(2, [(0, 1)]).unwrap();
        let a = normalize_adjacency(&pair, &acct).unwrap();
        for v in a.to_vec() {
            assert!((v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_matches_dense_formula() {
        let acct = MemoryAccountant::new();
        let g = barabasi_albert(30, 2, 3).unwrap();
        let n = g.n();
        let a = normalize_adjacency(&g, &acct).unwrap().to_vec();
        let mut dense = vec![0.0f64; n * n];
        for i in 0..n {
            dense[i * n + i] = 1.0;
        }
        for &(u, v) in g.edges() {
            dense[u * n + v] = 1.0;
            dense[v * n + u] = 1.0;
        }
        let deg: Vec<f64> = (0..n).map(|i| dense[i * n..(i + 1) * n].iter().sum()).collect();
        for i in 0..n {
            for j in 0..n {
                let expect = dense[i * n + j] / (deg[i] * deg[j]).sqrt();
                assert!((a[i * n + j] as f64 - expect).abs() < 1e-7);
                assert_eq!(a[i * n + j], a[j * n + i]);
                assert!((0.0..=1.0).contains(&a[i * n + j]));
            }
        }
    }

    #[test]
    fn padding_examples() {
        let g = Graph::new(2708, []).unwrap();
        let p = pad_to_multiple(&g, 8);
        assert_eq!(p.n(), 2712);
        assert_eq!(p.real_count(), 2708);
        assert_eq!(pad_to_multiple(&Graph::new(2048, []).unwrap(), 8), Graph::new(2048, []).unwrap());
        let one = pad_to_multiple(&Graph::new(1, []).unwrap(), 8);
        let mut expect = vec![false; 8];
        expect[0] = true;
        assert_eq!(one.pad_mask(), expect.as_slice());
    }

    #[test]
    fn strip_examples() {
        let acct = MemoryAccountant::new();
        let mask = [true, false, true, true, false, true, false, false];
        let m = PrecisionMatrix::from_f32(&acct, 8, 3, (0..24).map(|x| x as f32).collect(), Precision::Fp32).unwrap();
        let s = strip_padding(&m, &mask, StripAxes::Rows).unwrap();
        assert_eq!(s.shape(), (4, 3));
        assert_eq!(s.row(1), vec![6.0, 7.0, 8.0]);
        let sq = PrecisionMatrix::identity(&acct, 8, 8, Precision::Fp32).unwrap();
        assert_eq!(strip_padding(&sq, &mask, StripAxes::RowsAndCols).unwrap().shape(), (4, 4));
        let all = [true; 8];
        assert_eq!(strip_padding(&m, &all, StripAxes::Rows).unwrap().to_vec(), m.to_vec());
        assert!(strip_padding(&m, &mask[..4], StripAxes::Rows).is_err());
    }

    #[test]
    fn padded_identity_features() {
        let acct = MemoryAccountant::new();
        let g = pad_to_multiple(&Graph::new(3, [(0, 1)]).unwrap(), 4);
        let x = feature_matrix(&g, &acct, Precision::Fp32).unwrap();
        assert_eq!(x.shape(), (4, 3));
        assert_eq!(x.row(3), vec![0.0; 3]);
        assert_eq!(x.row(2), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn invalid_edges() {
        assert!(matches!(Graph::new(3, [(0, 3)]), Err(GraphError::EdgeOutOfRange { .. })));
        assert!(matches!(Graph::new(3, [(1, 1)]), Err(GraphError::SelfLoop(1))));
        assert_eq!(Graph::new(3, [(1, 0), (0, 1)]).unwrap().edges(), &[(0, 1)]);
    }

    #[test]
    fn parity_labels() {
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_eq!(hub_parity_labels(&g), vec![0, 1, 0, 1]);
    }
}
