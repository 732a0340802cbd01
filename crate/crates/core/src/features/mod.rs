//! Turning interaction tuples into transformer inputs.

mod embedder;
mod hashing;
pub mod io;
mod quant;
mod sequence;
mod temporal;

use serde::{Deserialize, Serialize};

pub use embedder::{embed_catalog, embed_item, embed_items, project_feedback};
pub use hashing::{hash_id, seeded_hash, splitmix64, IdTableConfig};
pub use quant::{dequantize, quantize_int8, QuantizedVector};
pub use sequence::{assemble_sequence, assemble_sequence_tape, SequenceElement, SequenceInput};
pub use temporal::{encode_time, encode_times, TemporalEncoderConfig, DAY, HOUR, PHASE_PARAM, YEAR};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub content_dim: usize,
    pub id_table: IdTableConfig,
    /// Hidden widths of the item embedders' MLPs.
    pub embedder_hidden: Vec<usize>,
    pub temporal: TemporalEncoderConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            content_dim: 16,
            id_table: IdTableConfig::default(),
            embedder_hidden: vec![64, 64],
            temporal: TemporalEncoderConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_dim == 0 {
            return Err(Error::validation("content_dim must be positive"));
        }
        if self.embedder_hidden.iter().any(|&d| d == 0) {
            return Err(Error::validation("embedder hidden widths must be positive"));
        }
        self.id_table.validate()?;
        self.temporal.validate()
    }
}
