//! Budgeted retrieval for a batch of generated embeddings.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::ItemIndex;
use crate::error::Result;
use crate::generation::EmbeddingBatch;
use crate::model::ConditionSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub item_id: u64,
    pub score: f64,
    /// Position of the generating embedding in the batch.
    pub source: usize,
    /// Conditions this item is credited to (see [`EmbeddingBatch::provenance`]).
    pub conditions: ConditionSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Ranked by score (then item id); no duplicate ids.
    pub items: Vec<RetrievedItem>,
    /// Some embedding could not fill its budget after deduplication.
    pub shortfall: bool,
}

/// For each embedding (in batch order) fetch `budget · overfetch`
/// neighbours, skip items an earlier embedding already took, and keep up to
/// `budget`. Kept items are credited to the embedding's members in turn.
/// The merged list is then ranked by score.
pub fn retrieve_for_batch(index: &ItemIndex, batch: &EmbeddingBatch, overfetch: usize) -> Result<RetrievalResult> {
    let mut taken = HashSet::new();
    let mut out = RetrievalResult::default();
    for (i, (e, &budget)) in batch.embeddings.iter().zip(&batch.budgets).enumerate() {
        if budget == 0 {
            continue;
        }
        let mut got = 0;
        for n in index.knn(&e.vector, budget, overfetch)? {
            if got == budget {
                break;
            }
            if taken.insert(n.item_id) {
                out.items.push(RetrievedItem { item_id: n.item_id, score: n.score, source: i, conditions: batch.provenance(i, got) });
                got += 1;
            }
        }
        out.shortfall |= got < budget;
    }
    out.items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OutputEmbedding;
    use crate::tensor::Tensor;

    fn axis_index() -> ItemIndex {
        // Items 0..4 near axis x, items 10..14 near axis y.
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for i in 0..5 {
            let a = 0.05 * i as f64;
            rows.push(vec![a.cos(), a.sin()]);
            ids.push(i);
            rows.push(vec![a.sin(), a.cos()]);
            ids.push(10 + i);
        }
        ItemIndex::build(ids, Tensor::from_rows(&rows, 2)).unwrap()
    }

    fn batch(vectors: &[[f64; 2]], budgets: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch::new(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| OutputEmbedding { vector: v.to_vec(), conditions: ConditionSet::new(Some(i), None, None), step: 0 })
                .collect(),
            budgets.to_vec(),
        )
    }

    #[test]
    fn merged_embedding_credits_each_member() {
        let merged = crate::generation::compress_embeddings(&batch(&[[1.0, 0.0], [1.0, 0.0]], &[3, 2]), 0.9);
        assert_eq!(merged.len(), 1);
        let r = retrieve_for_batch(&axis_index(), &merged, 2).unwrap();
        let mut by_action = [0; 2];
        for i in &r.items {
            by_action[i.conditions.action.unwrap()] += 1;
        }
        assert_eq!(by_action, [3, 2]);
    }

    #[test]
    fn disjoint_neighbourhoods_concatenate() {
        let r = retrieve_for_batch(&axis_index(), &batch(&[[1.0, 0.0], [0.0, 1.0]], &[3, 2]), 2).unwrap();
        assert_eq!(r.items.len(), 5);
        assert_eq!(r.items.iter().filter(|i| i.source == 0).count(), 3);
        assert!(r.items.iter().filter(|i| i.source == 0).all(|i| i.item_id < 10));
        assert!(!r.shortfall);
        assert!(r.items.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn identical_embeddings_deduplicate() {
        let r = retrieve_for_batch(&axis_index(), &batch(&[[1.0, 0.0], [1.0, 0.0]], &[2, 2]), 2).unwrap();
        let ids: HashSet<u64> = r.items.iter().map(|i| i.item_id).collect();
        assert_eq!(ids.len(), r.items.len());
        assert_eq!(r.items.len(), 4);
    }

    #[test]
    fn overlap_without_overfetch_reports_shortfall() {
        let r = retrieve_for_batch(&axis_index(), &batch(&[[1.0, 0.0], [1.0, 0.0]], &[3, 3]), 1).unwrap();
        assert_eq!(r.items.len(), 3);
        assert!(r.shortfall);
    }
}
