//! Offline retrieval metrics.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Per target: whether some prediction ranks it in the top `k` against the
/// negatives. A target's rank under a prediction is the number of negatives
/// scoring at least as high (ties count against the target), and it is
/// retrieved when that number is below `k`.
pub fn target_hits(preds: &Tensor, targets: &Tensor, negatives: &Tensor, k: usize) -> Vec<bool> {
    let mut hits = vec![false; targets.rows()];
    if k == 0 {
        return hits;
    }
    for p in preds.iter_rows() {
        let mut scores: Vec<f64> = negatives.iter_rows().map(|n| dot(p, n)).collect();
        scores.sort_unstable_by(|a, b| b.total_cmp(a));
        for (j, t) in targets.iter_rows().enumerate() {
            if !hits[j] {
                let s = dot(p, t);
                hits[j] = scores.partition_point(|&x| x >= s) < k;
            }
        }
    }
    hits
}

/// Fraction of targets retrieved in the top `k` by at least one prediction;
/// `None` when there are no targets.
pub fn unordered_recall(preds: &Tensor, targets: &Tensor, negatives: &Tensor, k: usize) -> Option<f64> {
    if targets.rows() == 0 {
        return None;
    }
    let hits = target_hits(preds, targets, negatives, k);
    Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Distinct items over the total retrieved, across users.
pub fn proportion_unique(sets: &[Vec<u64>]) -> Result<f64> {
    let total: usize = sets.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::validation("proportion_unique needs at least one retrieved item"));
    }
    let unique: HashSet<u64> = sets.iter().flatten().copied().collect();
    Ok(unique.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::normalized;

    fn random_unit(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normalized(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        Tensor::from_rows(&rows, d)
    }

    /// Literal reading of the definition: two nested loops per target.
    pub(crate) fn brute_force(preds: &Tensor, targets: &Tensor, negatives: &Tensor, k: usize) -> f64 {
        let mut found = 0;
        for t in targets.iter_rows() {
            let mut best = usize::MAX;
            for p in preds.iter_rows() {
                let s = dot(p, t);
                let mut rank = 0;
                for n in negatives.iter_rows() {
                    if dot(p, n) >= s {
                        rank += 1;
                    }
                }
                best = best.min(rank);
            }
            if best < k {
                found += 1;
            }
        }
        found as f64 / targets.rows() as f64
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (p, t, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..50));
            let d = rng.random_range(2..6);
            let preds = random_unit(&mut rng, p, d);
            let targets = random_unit(&mut rng, t, d);
            let negs = random_unit(&mut rng, n, d);
            for k in [1, 3, 10] {
                assert_eq!(unordered_recall(&preds, &targets, &negs, k).unwrap(), brute_force(&preds, &targets, &negs, k));
            }
        }
    }

    #[test]
    fn exact_prediction_is_always_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_unit(&mut rng, 1, 8);
        let negs = random_unit(&mut rng, 100, 8);
        assert_eq!(unordered_recall(&t, &t, &negs, 1), Some(1.0));
    }

    #[test]
    fn adversarial_negative_pushes_target_out() {
        let pred = Tensor::from_rows(&[[1.0, 0.0]], 2);
        let target = Tensor::from_rows(&[[0.0, 1.0]], 2);
        let negs = Tensor::from_rows(&[[1.0, 0.0]], 2);
        assert_eq!(unordered_recall(&pred, &target, &negs, 1), Some(0.0));
        assert_eq!(unordered_recall(&pred, &target, &negs, 2), Some(1.0));
        // A tie counts against the target.
        assert_eq!(unordered_recall(&pred, &pred, &negs, 1), Some(0.0));
    }

    #[test]
    fn empty_targets_are_skipped() {
        let p = Tensor::from_rows(&[[1.0, 0.0]], 2);
        assert_eq!(unordered_recall(&p, &Tensor::zeros(0, 2), &p, 10), None);
    }

    #[test]
    fn proportion_unique_examples() {
        let same = vec![vec![1, 2, 3]; 4];
        assert!((proportion_unique(&same).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(proportion_unique(&[vec![1, 2], vec![3, 4]]).unwrap(), 1.0);
        assert_eq!(proportion_unique(&[vec![1, 2, 3, 4], vec![3, 4, 5, 6]]).unwrap(), 0.75);
        assert!(proportion_unique(&[vec![], vec![]]).is_err());
    }

    proptest! {
        #[test]
        fn recall_is_monotone(seed in 0u64..500, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = random_unit(&mut rng, 3, 4);
            let targets = random_unit(&mut rng, 4, 4);
            let negs = random_unit(&mut rng, 30, 4);
            let r = unordered_recall(&preds, &targets, &negs, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(unordered_recall(&preds, &targets, &negs, k + 1).unwrap() >= r);
            let fewer = preds.slice_rows(0, 2);
            prop_assert!(unordered_recall(&fewer, &targets, &negs, k).unwrap() <= r);
        }
    }
}
