//! Integer budget allocation over generated embeddings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::events::ActionId;
use crate::model::OutputEmbedding;

/// Budget fractions per action; must sum to 1.
pub type Budgets = BTreeMap<ActionId, f64>;

pub fn validate_budgets(b: &Budgets) -> Result<()> {
    if b.is_empty() {
        return Err(Error::validation("budgets must name at least one action"));
    }
    if b.values().any(|&f| !(f >= 0.0 && f.is_finite())) {
        return Err(Error::validation("budget fractions must be non-negative"));
    }
    let sum: f64 = b.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("budget fractions sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Splits `total` over `weights` proportionally: floors first, then the
/// largest remainders; ties go to the earlier entry.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    // Guard against 0.29 * 100 = 28.999999999999996.
    let mut out: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - out[a] as f64;
        let rb = exact[b] - out[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Per-embedding item budgets summing to exactly `total`.
///
/// Without `budgets` every embedding gets an equal share. With `budgets`,
/// each action first receives `⌊N·B_a⌋` (remainders by largest fraction,
/// ties to the lower action id) and splits it equally over its embeddings
/// in generation order. Embeddings of actions outside `budgets` get 0.
pub fn allocate_budget(embeddings: &[OutputEmbedding], budgets: Option<&Budgets>, total: usize) -> Result<Vec<usize>> {
    let Some(budgets) = budgets else {
        return Ok(largest_remainder(total, &vec![1.0; embeddings.len()]));
    };
    validate_budgets(budgets)?;
    let actions: Vec<ActionId> = budgets.keys().copied().collect();
    let shares = largest_remainder(total, &budgets.values().copied().collect::<Vec<_>>());
    let mut out = vec![0; embeddings.len()];
    for (a, share) in actions.into_iter().zip(shares) {
        let members: Vec<usize> = (0..embeddings.len()).filter(|&i| embeddings[i].conditions.action == Some(a)).collect();
        if members.is_empty() {
            if share > 0 {
                return Err(Error::validation(format!("action {a} has a budget share but no embeddings")));
            }
            continue;
        }
        for (&i, b) in members.iter().zip(largest_remainder(share, &vec![1.0; members.len()])) {
            out[i] = b;
        }
    }
    Ok(out)
}
