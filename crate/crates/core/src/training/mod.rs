//! Teacher-forced training with a logQ-corrected sampled softmax.

mod batch;
mod cms;
mod gradcheck;
mod loss;
mod targets;
mod trainer;

use serde::{Deserialize, Serialize};

pub use batch::{build_negatives, feed_relaxed_loss, next_token_loss, prepare_batch, NegativeSet, PreparedBatch};
pub(crate) use batch::batch_loss_on_tape;
pub use cms::CountMinSketch;
pub use gradcheck::{check_gradients, loss_and_gradients, GroupCheck};
pub use loss::{sampled_softmax_loss, similarity};
pub use targets::{feed_target_set, sample_multi_token_targets};
pub use trainer::{split_windows, train, MetricRow, TrainHooks, TrainingReport};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    NextToken,
    FeedRelaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub num_random_negatives: usize,
    /// Initial similarity scale; only applied to a freshly initialised model.
    pub lambda_init: f64,
    pub adam: AdamConfig,
    /// Future targets sampled per position (1 = next item only).
    pub multi_token_k: usize,
    /// Window the extra targets are drawn from.
    pub multi_token_window: usize,
    pub loss_mode: LossMode,
    /// Weight of the feedback-adapter regression term.
    pub feedback_weight: f64,
    pub cms_width: usize,
    pub cms_depth: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 3,
            batch_size: 16,
            num_random_negatives: 256,
            lambda_init: 10.0,
            adam: AdamConfig::default(),
            multi_token_k: 1,
            multi_token_window: 1,
            loss_mode: LossMode::NextToken,
            feedback_weight: 1.0,
            cms_width: 4096,
            cms_depth: 4,
            max_steps: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("batch_size and epochs must be positive"));
        }
        if self.multi_token_k == 0 || self.multi_token_k > self.multi_token_window {
            return Err(Error::validation("multi_token_k must be in 1..=multi_token_window"));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::validation("lambda_init must be positive"));
        }
        if self.cms_width == 0 || self.cms_depth == 0 {
            return Err(Error::validation("sketch dimensions must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text).map_err(|e| Error::validation(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
