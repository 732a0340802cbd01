//! Conditioned output head: `[h; e_action; e_surface; e_offset] → MLP → L2`.

use serde::{Deserialize, Serialize};

use super::{normalized_mlp, ConditionSlots, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::events::{ActionId, SurfaceId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Requested outcome for one generated embedding. `None` selects the learned
/// null token of that slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_bucket: Option<usize>,
}

impl ConditionSet {
    pub const NULL: ConditionSet = ConditionSet { action: None, surface: None, offset_bucket: None };

    pub fn new(action: Option<ActionId>, surface: Option<SurfaceId>, offset_bucket: Option<usize>) -> Self {
        ConditionSet { action, surface, offset_bucket }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let checks = [
            ("action", self.action, cfg.num_actions),
            ("surface", self.surface, cfg.num_surfaces),
            ("offset bucket", self.offset_bucket, cfg.num_offset_buckets()),
        ];
        for (name, value, limit) in checks {
            if let Some(v) = value {
                if v >= limit {
                    return Err(Error::validation(format!("{name} {v} out of range 0..{limit}")));
                }
            }
        }
        Ok(())
    }
}

impl ConditionSlots {
    /// Drops the conditions this head was not trained to read.
    pub fn apply(&self, c: ConditionSet) -> ConditionSet {
        ConditionSet {
            action: c.action.filter(|_| self.action),
            surface: c.surface.filter(|_| self.surface),
            offset_bucket: c.offset_bucket.filter(|_| self.offset),
        }
    }
}

/// A unit-norm generated item representation and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEmbedding {
    pub vector: Vec<f64>,
    pub conditions: ConditionSet,
    pub step: usize,
}

/// Head over the rows of `h` (`n × model_dim`), one condition set per row.
pub(crate) fn head(tape: &mut Tape<'_>, cfg: &ModelConfig, h: Var, conds: &[ConditionSet]) -> Result<Var> {
    if tape.value(h).rows() != conds.len() {
        return Err(Error::validation("one condition set per hidden state is required"));
    }
    for c in conds {
        c.validate(cfg)?;
    }
    let actions: Vec<usize> = conds.iter().map(|c| c.action.unwrap_or(cfg.num_actions)).collect();
    let surfaces: Vec<usize> = conds.iter().map(|c| c.surface.unwrap_or(cfg.num_surfaces)).collect();
    let offsets: Vec<usize> = conds.iter().map(|c| c.offset_bucket.unwrap_or(cfg.num_offset_buckets())).collect();
    let store = tape.store();
    let ea = tape.gather(store.expect("head.cond.action"), &actions);
    let es = tape.gather(store.expect("head.cond.surface"), &surfaces);
    let eo = tape.gather(store.expect("head.cond.offset"), &offsets);
    let x = tape.concat_cols(&[h, ea, es, eo]);
    Ok(normalized_mlp(tape, "head", cfg.head_hidden_dims.len(), x))
}

impl Model {
    pub fn output_head(&self, h: &[f64], conds: &ConditionSet) -> Result<Vec<f64>> {
        Ok(self.output_heads(h, std::slice::from_ref(conds))?.into_vec())
    }

    /// One output per condition set, all from the same hidden state.
    /// Conditions outside the model's trained slots are read as null.
    pub fn output_heads(&self, h: &[f64], conds: &[ConditionSet]) -> Result<Tensor> {
        if h.len() != self.config().model_dim {
            return Err(Error::validation("hidden state width does not match model_dim"));
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("non-finite hidden state"));
        }
        let mut tape = self.tape();
        let row = tape.constant(Tensor::row_vector(h.to_vec()));
        let rows = tape.select_rows(row, &vec![0; conds.len()]);
        let conds: Vec<ConditionSet> = conds.iter().map(|&c| self.config().conditioning.apply(c)).collect();
        let out = head(&mut tape, self.config(), rows, &conds)?;
        Ok(tape.value(out).clone())
    }
}
