//! Scalar reference forms of the corrected similarity and sampled softmax.
//! Training uses the fused tape op; these are used for checks and tooling.

use crate::tensor::dot;

/// `λ·⟨pred, cand⟩ − log Q(cand)`.
pub fn similarity(pred: &[f64], cand: &[f64], lambda: f64, log_q: f64) -> f64 {
    lambda * dot(pred, cand) - log_q
}

/// `−log softmax` of the target over `{target} ∪ negatives`.
/// Each candidate is `(vector, log Q)`. Returns 0 when there are no negatives.
pub fn sampled_softmax_loss(pred: &[f64], target: (&[f64], f64), negatives: &[(&[f64], f64)], lambda: f64) -> f64 {
    if negatives.is_empty() {
        log::warn!("sampled softmax with no negatives; loss is 0");
        return 0.0;
    }
    let st = similarity(pred, target.0, lambda, target.1);
    let scores: Vec<f64> = negatives.iter().map(|&(c, q)| similarity(pred, c, lambda, q)).collect();
    let m = scores.iter().copied().fold(st, f64::max);
    let z = (st - m).exp() + scores.iter().map(|s| (s - m).exp()).sum::<f64>();
    (m + z.ln() - st).max(0.0)
}
