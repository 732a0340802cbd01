//! Target selection: multi-token sampling and feed-session target sets.

use rand::seq::index::sample;
use rand::Rng;

use crate::events::InteractionEvent;
use crate::model::ModelConfig;

/// Samples up to `k` distinct positions from `t+1 ..= min(t+window, len-1)`,
/// always including `t+1`. Returned positions increase strictly; each is
/// paired with the offset bucket of its gap from position `t`.
pub fn sample_multi_token_targets<R: Rng>(
    timestamps: &[i64],
    t: usize,
    k: usize,
    window: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let last = (t + window).min(timestamps.len().saturating_sub(1));
    if k == 0 || t + 1 > last {
        return Vec::new();
    }
    let mut picked = vec![t + 1];
    let rest = last - (t + 1);
    if k > 1 && rest > 0 {
        picked.extend(sample(rng, rest, (k - 1).min(rest)).into_iter().map(|i| t + 2 + i));
    }
    picked.sort_unstable();
    picked.into_iter().map(|j| (j, cfg.offset_bucket((timestamps[j] - timestamps[t]) as f64))).collect()
}

/// Positions `j > t` engaged in the same feed session as position `t+1`.
/// Always contains `t+1` when it exists.
pub fn feed_target_set(events: &[InteractionEvent], t: usize) -> Vec<usize> {
    match events.get(t + 1) {
        None => Vec::new(),
        Some(next) => (t + 1..events.len()).filter(|&j| events[j].feed_id == next.feed_id).collect(),
    }
}
