//! Seeded fixtures shared by the benchmarks.

use cbir_dx_core::synth;
use cbir_dx_core::NormalizedIndex;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` random vectors of width `dim`.
pub fn vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth::nonzero_vector(&mut rng, dim)).collect()
}

pub fn index(n: usize, dim: usize, seed: u64) -> NormalizedIndex {
    synth::index_from_vectors(&vectors(n, dim, seed)).expect("random vectors are valid")
}

/// Tied scores with both classes present.
pub fn scored(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth::random_scored_instance(&mut rng, n, n / 4)
}

/// Case indices split by truth, as the bootstrap expects them.
pub fn strata(truth: &[bool]) -> (Vec<usize>, Vec<usize>) {
    (0..truth.len()).partition(|&i| truth[i])
}
