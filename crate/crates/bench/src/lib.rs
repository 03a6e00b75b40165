//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankforge_core::gradcheck::random_relevance;
use rankforge_core::{Matrix, RelevanceMatrix, SimilarityMatrix};

/// A seeded `n × n` similarity batch with matching random relevance.
pub fn batch(n: usize, seed: u64) -> (SimilarityMatrix, RelevanceMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let r = random_relevance(&mut rng, n, 16);
    (SimilarityMatrix::new(s).expect("finite"), r)
}
