//! Offline evaluation: per-user future-window split, autoregressive
//! generation without teacher forcing, unordered recall and diversity.

mod harness;
mod metrics;
mod report;

use serde::{Deserialize, Serialize};

pub use harness::{
    conditioned_lift_matrix, mt_conditions, mt_tradeoff_sweep, summarize, CaseOutcome, EvalCase, Evaluator, LiftMatrix,
    ModeSummary, SweepRow,
};
pub use metrics::{proportion_unique, target_hits, unordered_recall};
pub use report::{evaluate_by_surface, write_eval_csv, write_lift_csv, write_sweep_csv, EvalRow};

use crate::error::{Error, Result};
use crate::events::InteractionEvent;
use crate::features::seeded_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub k: usize,
    /// Size of the random-negative catalog targets are ranked against.
    pub num_negatives: usize,
    /// Future pin engagements per user used as targets.
    pub targets_per_user: usize,
    /// Share of users (percent, by hashed id) held out for evaluation.
    pub eval_percent: u64,
    /// Evaluate at most this many users (0 = all).
    pub max_users: usize,
    /// Autoregressive steps for UC and OC requests.
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            k: 10,
            num_negatives: 100_000,
            targets_per_user: 10,
            eval_percent: 10,
            max_users: 0,
            num_steps: 1,
            seed: 0,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.num_negatives == 0 || self.targets_per_user == 0 || self.num_steps == 0 {
            return Err(Error::validation("k, num_negatives, targets_per_user and num_steps must be positive"));
        }
        if self.eval_percent == 0 || self.eval_percent >= 100 {
            return Err(Error::validation("eval_percent must be in 1..100"));
        }
        Ok(())
    }

    pub fn is_eval_user(&self, user_id: u64) -> bool {
        seeded_hash(user_id, self.seed ^ 0xe7a1) % 100 < self.eval_percent
    }

    /// Splits per-user histories into (training, evaluation) by user id.
    pub fn partition_users(&self, histories: Vec<Vec<InteractionEvent>>) -> (Vec<Vec<InteractionEvent>>, Vec<Vec<InteractionEvent>>) {
        histories.into_iter().filter(|h| !h.is_empty()).partition(|h| !self.is_eval_user(h[0].user_id))
    }
}
