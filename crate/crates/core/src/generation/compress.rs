//! Greedy merging of near-duplicate generated embeddings.

use crate::model::{ConditionSet, OutputEmbedding};
use crate::tensor::cosine;

/// Generated embeddings with their item budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Vec<OutputEmbedding>,
    pub budgets: Vec<usize>,
    /// Per embedding, the condition sets whose budgets it carries, in
    /// generation order. A merged embedding lists every member.
    pub attribution: Vec<Vec<(ConditionSet, usize)>>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Vec<OutputEmbedding>, budgets: Vec<usize>) -> Self {
        let attribution = embeddings.iter().zip(&budgets).map(|(e, &b)| vec![(e.conditions, b)]).collect();
        EmbeddingBatch { embeddings, budgets, attribution }
    }

    /// Conditions credited with the `rank`-th item kept for embedding `i`:
    /// members claim consecutive runs of their own budget.
    pub fn provenance(&self, i: usize, rank: usize) -> ConditionSet {
        let mut end = 0;
        for &(c, b) in self.attribution.get(i).into_iter().flatten() {
            end += b;
            if rank < end {
                return c;
            }
        }
        self.embeddings[i].conditions
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn total_budget(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Single pass in generation order: each embedding merges into the first
/// earlier survivor with cosine above `threshold` (budgets add up), or
/// becomes a survivor itself.
pub fn compress_embeddings(batch: &EmbeddingBatch, threshold: f64) -> EmbeddingBatch {
    let mut out = EmbeddingBatch { embeddings: Vec::new(), budgets: Vec::new(), attribution: Vec::new() };
    for (j, (e, &b)) in batch.embeddings.iter().zip(&batch.budgets).enumerate() {
        let members = batch.attribution.get(j).cloned().unwrap_or_else(|| vec![(e.conditions, b)]);
        match out.embeddings.iter().position(|s| cosine(&s.vector, &e.vector) > threshold) {
            Some(i) => {
                out.budgets[i] += b;
                out.attribution[i].extend(members);
            }
            None => {
                out.embeddings.push(e.clone());
                out.budgets.push(b);
                out.attribution.push(members);
            }
        }
    }
    out
}
