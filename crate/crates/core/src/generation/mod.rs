//! Autoregressive generation of item embeddings, budget allocation and
//! compression.

mod budget;
mod compress;
mod rollout;

use serde::{Deserialize, Serialize};

pub use budget::{allocate_budget, validate_budgets, Budgets};
pub use compress::{compress_embeddings, EmbeddingBatch};
pub use rollout::{generate, plan, rollout_multi_token, rollout_outcome_conditioned, rollout_unconditional, Rollout};

use crate::error::{Error, Result};
use crate::events::{ActionId, SurfaceId};
use crate::model::{ConditionSet, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// One null-conditioned embedding per step.
    Uc,
    /// One embedding per requested action per step.
    Oc,
    /// One embedding per (offset bucket, action) per step.
    #[serde(alias = "mt")]
    MtOc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationRequest {
    pub request_id: u64,
    pub surface: SurfaceId,
    pub mode: GenerationMode,
    pub num_steps: usize,
    /// Item budget fractions per action (B). Ignored in UC mode.
    pub budgets: Budgets,
    /// Sampling weights over the budgeted actions used to pick the
    /// continuation embedding (D). Defaults to the budget fractions.
    pub action_weights: Option<Budgets>,
    /// Offset buckets emitted per step in MT mode, in order; the first one
    /// feeds the continuation.
    pub offset_buckets: Vec<usize>,
    /// Explicit per-step condition sets; overrides the action × offset grid.
    pub conditions: Option<Vec<ConditionSet>>,
    pub total_items: usize,
    pub compression_threshold: f64,
    pub seed: u64,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        GenerationRequest {
            request_id: 0,
            surface: 0,
            mode: GenerationMode::Uc,
            num_steps: 1,
            budgets: Budgets::new(),
            action_weights: None,
            offset_buckets: vec![0],
            conditions: None,
            total_items: 100,
            compression_threshold: 0.9,
            seed: 0,
        }
    }
}

impl GenerationRequest {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.num_steps == 0 || self.total_items == 0 {
            return Err(Error::validation("num_steps and total_items must be positive"));
        }
        if self.surface >= cfg.num_surfaces {
            return Err(Error::validation(format!("surface {} out of range 0..{}", self.surface, cfg.num_surfaces)));
        }
        if !(self.compression_threshold > 0.0 && self.compression_threshold <= 1.0) {
            return Err(Error::validation("compression_threshold must be in (0, 1]"));
        }
        if self.mode != GenerationMode::Uc {
            validate_budgets(&self.budgets)?;
            if let Some(&a) = self.budgets.keys().find(|&&a| a >= cfg.num_actions) {
                return Err(Error::validation(format!("action {a} out of range 0..{}", cfg.num_actions)));
            }
        }
        if self.mode == GenerationMode::MtOc {
            if self.offset_buckets.is_empty() && self.conditions.is_none() {
                return Err(Error::validation("multi-token generation needs at least one offset bucket"));
            }
            if let Some(&o) = self.offset_buckets.iter().find(|&&o| o >= cfg.num_offset_buckets()) {
                return Err(Error::validation(format!("unknown offset bucket {o}")));
            }
        }
        if let Some(c) = &self.conditions {
            if c.is_empty() {
                return Err(Error::validation("explicit condition list is empty"));
            }
            for set in c {
                set.validate(cfg)?;
            }
        }
        Ok(())
    }

    /// Actions with a positive budget share, ascending.
    pub fn actions(&self) -> Vec<ActionId> {
        self.budgets.iter().filter(|(_, &f)| f > 0.0).map(|(&a, _)| a).collect()
    }

    /// Embeddings generated per step.
    pub fn per_step(&self) -> usize {
        match (&self.conditions, self.mode) {
            (Some(c), _) => c.len(),
            (None, GenerationMode::Uc) => 1,
            (None, GenerationMode::Oc) => self.actions().len(),
            (None, GenerationMode::MtOc) => self.actions().len() * self.offset_buckets.len(),
        }
    }
}

/// Autoregressive steps needed for `total` embeddings at `per_step` each.
pub fn steps_for(total: usize, per_step: usize) -> usize {
    total.div_ceil(per_step.max(1))
}
