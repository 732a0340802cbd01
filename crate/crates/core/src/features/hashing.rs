//! Multi-hash ID embedding lookup.
//!
//! An item id is hashed by `num_hashes` independent seeded mixers; each hash
//! selects one row of its own table and the rows are concatenated into the
//! `num_hashes × dims_per_hash` ID embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdTableConfig {
    pub num_rows: usize,
    pub num_hashes: usize,
    pub dims_per_hash: usize,
    pub seeds: Vec<u64>,
}

impl Default for IdTableConfig {
    fn default() -> Self {
        IdTableConfig::with_seed(1 << 16, 8, 8, 0x51ed_270b)
    }
}

impl IdTableConfig {
    /// Derives `num_hashes` seeds from one base seed.
    pub fn with_seed(num_rows: usize, num_hashes: usize, dims_per_hash: usize, base_seed: u64) -> Self {
        let seeds = (0..num_hashes as u64).map(|h| splitmix64(base_seed ^ splitmix64(h))).collect();
        IdTableConfig { num_rows, num_hashes, dims_per_hash, seeds }
    }

    pub fn id_dim(&self) -> usize {
        self.num_hashes * self.dims_per_hash
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rows == 0 || self.num_hashes == 0 || self.dims_per_hash == 0 {
            return Err(Error::validation("id table dimensions must be positive"));
        }
        if self.seeds.len() != self.num_hashes {
            return Err(Error::validation(format!(
                "id table has {} seeds for {} hashes",
                self.seeds.len(),
                self.num_hashes
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded_hash(value: u64, seed: u64) -> u64 {
    splitmix64(value ^ splitmix64(seed))
}

/// One row index per hash, each in `0..num_rows`.
pub fn hash_id(item_id: u64, table: &IdTableConfig) -> Vec<usize> {
    table.seeds.iter().map(|&s| (seeded_hash(item_id, s) % table.num_rows as u64) as usize).collect()
}
