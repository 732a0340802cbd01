use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;

/// Which condition slots the output head was trained to read. Inactive slots
/// are always fed the null embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSlots {
    pub action: bool,
    pub surface: bool,
    pub offset: bool,
}

impl ConditionSlots {
    pub const NONE: ConditionSlots = ConditionSlots { action: false, surface: false, offset: false };
    pub const OUTCOME: ConditionSlots = ConditionSlots { action: true, surface: true, offset: false };
    pub const OUTCOME_TEMPORAL: ConditionSlots = ConditionSlots { action: true, surface: true, offset: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub cond_dim: usize,
    pub num_actions: usize,
    pub num_surfaces: usize,
    /// Upper edges (seconds) of the temporal offset buckets; there is one
    /// more bucket than edges.
    pub offset_boundaries_secs: Vec<f64>,
    pub output_dim: usize,
    pub head_hidden_dims: Vec<usize>,
    pub conditioning: ConditionSlots,
    pub features: FeatureConfig,
    /// Continuation offset for generated tokens, seconds.
    pub generation_offset_secs: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            max_seq_len: 128,
            cond_dim: 16,
            num_actions: 5,
            num_surfaces: 3,
            offset_boundaries_secs: vec![30.0, 300.0, 3600.0, 86_400.0],
            output_dim: 32,
            head_hidden_dims: vec![128],
            conditioning: ConditionSlots::OUTCOME,
            features: FeatureConfig::default(),
            generation_offset_secs: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_offset_buckets(&self) -> usize {
        self.offset_boundaries_secs.len() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Bucket of a non-negative time gap; gaps past the last edge land in
    /// the last bucket.
    pub fn offset_bucket(&self, gap_secs: f64) -> usize {
        self.offset_boundaries_secs.iter().take_while(|&&edge| gap_secs >= edge).count()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("cond_dim", self.cond_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::validation("model_dim must be divisible by num_heads"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::validation("max_seq_len must be at least 2"));
        }
        if self.head_hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("head_hidden_dims must be positive"));
        }
        if self.offset_boundaries_secs.windows(2).any(|w| w[1] <= w[0])
            || self.offset_boundaries_secs.iter().any(|&e| !(e > 0.0))
        {
            return Err(Error::validation("offset boundaries must be positive and increasing"));
        }
        if !(self.generation_offset_secs >= 0.0) {
            return Err(Error::validation("generation_offset_secs must be non-negative"));
        }
        self.features.validate()
    }

    /// A 2-layer, width-16 model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        let mut features = FeatureConfig {
            content_dim: 6,
            embedder_hidden: vec![8],
            ..FeatureConfig::default()
        };
        features.id_table = crate::features::IdTableConfig::with_seed(64, 2, 3, 5);
        features.temporal.rel_num_freqs = 3;
        features.temporal.rel_log_base = crate::features::YEAR.powf(0.5);
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            ffn_dim: 24,
            max_seq_len: 16,
            cond_dim: 4,
            num_actions: 3,
            num_surfaces: 3,
            output_dim: 8,
            head_hidden_dims: vec![12],
            conditioning: ConditionSlots::OUTCOME_TEMPORAL,
            features,
            ..ModelConfig::default()
        }
    }
}
