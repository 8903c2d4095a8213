use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphError};

/// Preferential-attachment graph on `n` vertices.
///
/// Starts from a star with hub 0 and leaves `1..=m`; every later vertex
/// attaches to `m` distinct existing vertices drawn with probability
/// proportional to degree. Yields exactly `m + m * (n - m - 1)` edges.
pub fn barabasi_albert(n: usize, m: usize, seed: u64) -> Result<Graph, GraphError> {
    if m < 1 || m >= n {
        return Err(GraphError::InvalidAttachment { n, m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(m + m * (n - m - 1));
    // Each vertex appears once per incident edge.
    let mut endpoints = Vec::with_capacity(2 * edges.capacity());
    for leaf in 1..=m {
        edges.push((0, leaf));
        endpoints.extend([0, leaf]);
    }
    let mut targets = Vec::with_capacity(m);
    for v in (m + 1)..n {
        targets.clear();
        while targets.len() < m {
            let t = endpoints[rng.gen_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
        }
    }
    Graph::new(n, edges)
}
