//! Input assembly: `x_t = W [item_emb ; time_enc] + b + surface_emb`.

use super::encode_times;
use crate::error::{Error, Result};
use crate::events::{check_chronological, Catalog, InteractionEvent, ItemFeature, SurfaceId};
use crate::model::{linear, Model, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Non-item context of one position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceElement {
    pub surface: SurfaceId,
    /// Absolute timestamp in seconds.
    pub t_abs: f64,
    /// Seconds since the previous position (0 for the first).
    pub dt: f64,
}

impl SequenceElement {
    /// Context for a chronologically sorted event list.
    pub fn from_events(events: &[InteractionEvent]) -> Result<Vec<SequenceElement>> {
        check_chronological(events)?;
        Ok(events
            .iter()
            .enumerate()
            .map(|(i, e)| SequenceElement {
                surface: e.surface,
                t_abs: e.ts as f64,
                dt: if i == 0 { 0.0 } else { (e.ts - events[i - 1].ts) as f64 },
            })
            .collect())
    }
}

/// Transformer-ready inputs for one user history.
#[derive(Clone, Debug)]
pub struct SequenceInput {
    pub inputs: Tensor,
    pub elements: Vec<SequenceElement>,
    pub item_ids: Vec<u64>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Combines per-position item embeddings (`n × output_dim`) with time and
/// surface features.
pub fn assemble_sequence_tape(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    item_emb: Var,
    elements: &[SequenceElement],
) -> Result<Var> {
    if tape.value(item_emb).rows() != elements.len() {
        return Err(Error::validation("one sequence element per item embedding is required"));
    }
    if let Some(e) = elements.iter().find(|e| e.surface >= cfg.num_surfaces) {
        return Err(Error::validation(format!("surface {} out of range 0..{}", e.surface, cfg.num_surfaces)));
    }
    if elements.is_empty() {
        return Ok(tape.constant(Tensor::zeros(0, cfg.model_dim)));
    }
    let times: Vec<(f64, f64)> = elements.iter().map(|e| (e.t_abs, e.dt)).collect();
    let enc = encode_times(tape, &times, &cfg.features.temporal)?;
    let x = tape.concat_cols(&[item_emb, enc]);
    let x = linear(tape, "input.proj", x);
    let surfaces: Vec<usize> = elements.iter().map(|e| e.surface).collect();
    let s = tape.gather(tape.store().expect("input.surface"), &surfaces);
    Ok(tape.add(x, s))
}

/// Builds the input sequence for a sorted event list. An empty list gives an
/// empty sequence.
pub fn assemble_sequence(model: &Model, events: &[InteractionEvent], catalog: &Catalog) -> Result<SequenceInput> {
    let elements = SequenceElement::from_events(events)?;
    let items: Vec<&ItemFeature> = events.iter().map(|e| catalog.require(e.item_id)).collect::<Result<_>>()?;
    let mut tape = model.tape();
    let emb = super::embed_items(&mut tape, model.config(), &items)?;
    let x = assemble_sequence_tape(&mut tape, model.config(), emb, &elements)?;
    Ok(SequenceInput {
        inputs: tape.value(x).clone(),
        elements,
        item_ids: events.iter().map(|e| e.item_id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::ItemType;

    fn catalog() -> Catalog {
        Catalog::new(
            (0..4)
                .map(|i| ItemFeature {
                    item_id: i,
                    item_type: if i == 3 { ItemType::Query } else { ItemType::Pin },
                    content: (0..6).map(|k| ((i * 7 + k) as f32 * 0.21).cos()).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn event(item_id: u64, ts: i64) -> InteractionEvent {
        InteractionEvent { user_id: 1, item_id, action: 0, surface: 1, ts, feed_id: 0 }
    }

    #[test]
    fn assembles_one_row_per_event() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let seq = assemble_sequence(&m, &[event(0, 10), event(3, 20), event(2, 50)], &catalog()).unwrap();
        assert_eq!(seq.inputs.shape(), (3, 16));
        assert_eq!(seq.elements[2].dt, 30.0);
        assert_eq!(seq.elements[0].dt, 0.0);
        assert!(seq.inputs.all_finite());
    }

    #[test]
    fn empty_history_gives_empty_sequence() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let seq = assemble_sequence(&m, &[], &catalog()).unwrap();
        assert!(seq.is_empty());
        assert_eq!(seq.inputs.shape(), (0, 16));
    }

    #[test]
    fn unsorted_events_are_rejected() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        assert!(assemble_sequence(&m, &[event(0, 10), event(1, 5)], &catalog()).is_err());
    }

    #[test]
    fn unknown_item_is_rejected() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        assert!(assemble_sequence(&m, &[event(99, 10)], &catalog()).is_err());
    }
}
