//! Every hard metric against a definitional oracle on random small instances.

use perms::permutations;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankforge_core::losses::batch_idcg;
use rankforge_core::metrics::{
    approximation_error, dcg_at, map_at_r_and_rprecision, ndcg_at, rank_candidates, recall_at_k,
    RankedQueryResult,
};
use rankforge_core::{Matrix, RelevanceMatrix, SimilarityMatrix};

mod perms {
    /// All permutations of `0..n` (Heap's algorithm).
    pub fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut a: Vec<usize> = (0..n).collect();
        let mut out = vec![a.clone()];
        let mut c = vec![0usize; n];
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    a.swap(0, i);
                } else {
                    a.swap(c[i], i);
                }
                out.push(a.clone());
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        out
    }
}

const INSTANCES: usize = 1000;

fn oracle_dcg(rel: &[f64], p: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=p {
        total += (2f64.powf(rel[i - 1]) - 1.0) / (1.0 + i as f64).log2();
    }
    total
}

/// Maximum DCG over every permutation.
fn oracle_ideal_dcg(rel: &[f64], p: usize) -> f64 {
    permutations(rel.len())
        .iter()
        .map(|perm| {
            let permuted: Vec<f64> = perm.iter().map(|&k| rel[k]).collect();
            oracle_dcg(&permuted, p)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Order by repeatedly extracting the best remaining candidate (lowest index on ties).
fn oracle_order(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if scores[left[k]] > scores[left[best]] {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn random_query(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let m = rng.random_range(1..=max_len);
    // coarse scores so ties actually occur
    let scores: Vec<f64> = (0..m)
        .map(|_| rng.random_range(0..6) as f64 / 5.0)
        .collect();
    let mut rel: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    rel[rng.random_range(0..m)] = rng.random_range(0.5..1.0);
    let mut positives: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.3)).collect();
    if positives.is_empty() {
        positives.push(rng.random_range(0..m));
    }
    (scores, rel, positives)
}

#[test]
fn ranking_matches_selection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..1000).map(|_| rng.random_range(0..200) as f64).collect();
    assert_eq!(rank_candidates(&scores), oracle_order(&scores));
    for _ in 0..INSTANCES {
        let (s, _, _) = random_query(&mut rng, 12);
        assert_eq!(rank_candidates(&s), oracle_order(&s));
    }
}

#[test]
fn dcg_and_ndcg_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let (scores, rel, pos) = random_query(&mut rng, 7);
        let p = rng.random_range(1..=scores.len());
        let q = RankedQueryResult::from_scores(&scores, rel.clone(), pos);
        let ranked: Vec<f64> = oracle_order(&scores).iter().map(|&k| rel[k]).collect();
        assert!((dcg_at(&ranked, p).unwrap() - oracle_dcg(&ranked, p)).abs() < 1e-12);
        let expected = oracle_dcg(&ranked, p) / oracle_ideal_dcg(&rel, p);
        let got = ndcg_at(&q, p).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
}

#[test]
fn batch_idcg_matches_exhaustive_maximum_for_distinct_relevance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=7);
        let rel: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = batch_idcg(&rel).unwrap();
        assert!((got - oracle_ideal_dcg(&rel, n)).abs() < 1e-12);
    }
}

#[test]
fn recall_map_and_rprecision_match_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let (scores, rel, pos) = random_query(&mut rng, 15);
        let q = RankedQueryResult::from_scores(&scores, rel, pos.clone());
        let order = oracle_order(&scores);
        let rank_of: Vec<usize> = {
            let mut r = vec![0; order.len()];
            for (i, &c) in order.iter().enumerate() {
                r[c] = i + 1;
            }
            r
        };
        let mut prev = false;
        for k in 1..=order.len() + 2 {
            let expected = pos.iter().any(|&p| rank_of[p] <= k);
            let got = recall_at_k(&q, k);
            assert_eq!(got, expected);
            assert!(!prev || got, "recall must not drop as k grows");
            prev = got;
        }
        // definitions: precision at cutoff i, relevance indicator at rank i
        let r = pos.len();
        let is_pos = |c: usize| pos.contains(&c);
        let precision_at =
            |i: usize| order[..i].iter().filter(|&&c| is_pos(c)).count() as f64 / i as f64;
        let map: f64 = (1..=r)
            .map(|i| {
                if is_pos(order[i - 1]) {
                    precision_at(i)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / r as f64;
        let rp = precision_at(r);
        let (gm, grp) = map_at_r_and_rprecision(&q).unwrap();
        assert!((gm - map).abs() < 1e-12);
        assert!((grp - rp).abs() < 1e-12);
    }
}

#[test]
fn metrics_depend_only_on_the_induced_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (scores, rel, pos) = random_query(&mut rng, 12);
        let moved: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() - 7.0).collect();
        let a = RankedQueryResult::from_scores(&scores, rel.clone(), pos.clone());
        let b = RankedQueryResult::from_scores(&moved, rel, pos);
        assert_eq!(a.order, b.order);
        let p = a.order.len();
        assert_eq!(ndcg_at(&a, p).unwrap(), ndcg_at(&b, p).unwrap());
        assert_eq!(
            map_at_r_and_rprecision(&a).unwrap(),
            map_at_r_and_rprecision(&b).unwrap()
        );
    }
}

#[test]
fn approximation_error_cases() {
    // saturated: gaps far above tau
    let n = 5;
    let s = SimilarityMatrix::new(Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.9
        } else {
            0.1 * ((i * n + j) % 7) as f64 - 0.3 + 0.001 * i as f64
        }
    }))
    .unwrap();
    let r = RelevanceMatrix::new(Matrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            0.2 + 0.01 * ((i + 2 * j) % 9) as f64
        }
    }))
    .unwrap();
    assert!(approximation_error(&s, &r, 1e-4).unwrap().mean < 1e-3);

    // fixed random batch, shrinking tau
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 16;
    let s =
        SimilarityMatrix::new(Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))).unwrap();
    let r = RelevanceMatrix::new(Matrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            rng.random_range(0.2..0.9)
        }
    }))
    .unwrap();
    let errs: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&t| approximation_error(&s, &r, t).unwrap().mean)
        .collect();
    assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
}
