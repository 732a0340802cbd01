use std::collections::HashMap;

use crate::events::InteractionEvent;

/// Plug-in estimate of I(action; cluster) in nats over a log.
pub fn action_cluster_mutual_information(events: &[InteractionEvent], cluster_of: &HashMap<u64, usize>) -> f64 {
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pc: HashMap<usize, f64> = HashMap::new();
    let mut n = 0.0;
    for e in events {
        let Some(&c) = cluster_of.get(&e.item_id) else { continue };
        *joint.entry((e.action, c)).or_default() += 1.0;
        *pa.entry(e.action).or_default() += 1.0;
        *pc.entry(c).or_default() += 1.0;
        n += 1.0;
    }
    joint.iter().map(|(&(a, c), &k)| k / n * (k * n / (pa[&a] * pc[&c])).ln()).sum()
}
