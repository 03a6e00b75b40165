use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankforge_core::{CaptionEmbeddings, Matrix};

#[test]
fn batch_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let raw = Matrix::from_fn(20, 6, |_, _| rng.random_range(-1.0..1.0));
    let e = CaptionEmbeddings::new(raw).unwrap();
    let ids = [3, 17, 0, 9, 12, 5, 19, 1];
    let batch = e.batch_relevance(&ids).unwrap();
    for (a, &ia) in ids.iter().enumerate() {
        for (b, &ib) in ids.iter().enumerate() {
            let scalar = e.relevance_score(ia, ib).unwrap();
            assert!((batch.values()[(a, b)] - scalar).abs() < 1e-12);
        }
        assert!((batch.values()[(a, a)] - 1.0).abs() < 1e-9);
    }
    assert_eq!(batch.values(), batch.transpose().values());
}

proptest! {
    #[test]
    fn positive_rescaling_leaves_relevance_unchanged(
        cells in proptest::collection::vec(-1.0f64..1.0, 24),
        scales in proptest::collection::vec(1e-3f64..1e3, 6),
    ) {
        let raw = Matrix::from_vec(6, 4, cells).unwrap();
        prop_assume!((0..6).all(|i| raw.row(i).iter().any(|x| x.abs() > 1e-3)));
        let scaled = Matrix::from_fn(6, 4, |i, j| raw[(i, j)] * scales[i]);
        let ids: Vec<usize> = (0..6).collect();
        let a = CaptionEmbeddings::new(raw).unwrap().batch_relevance(&ids).unwrap();
        let b = CaptionEmbeddings::new(scaled).unwrap().batch_relevance(&ids).unwrap();
        prop_assert!(a.values().max_abs_diff(b.values()) < 1e-9);
        prop_assert!(a.values().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
