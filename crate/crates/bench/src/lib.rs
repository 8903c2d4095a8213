//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gplab::{MemoryAccountant, Precision, PrecisionMatrix};

/// Uniform `[-1, 1)` matrix at `precision`.
pub fn random_matrix(
    acct: &MemoryAccountant,
    rows: usize,
    cols: usize,
    precision: Precision,
    seed: u64,
) -> PrecisionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    PrecisionMatrix::from_f32(acct, rows, cols, data, precision).expect("unbudgeted accountant")
}
