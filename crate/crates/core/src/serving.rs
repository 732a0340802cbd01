//! Request pipeline: signals → context → featurize → rollout → budget →
//! compress → retrieve.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Catalog, InteractionEvent, ItemFeature, SurfaceId};
use crate::features::{assemble_sequence_tape, dequantize, embed_items, quantize_int8, SequenceElement, SequenceInput};
use crate::generation::{plan, Budgets, GenerationMode, GenerationRequest};
use crate::index::{retrieve_for_batch, ItemIndex};
use crate::model::{ConditionSet, Model};
use crate::signals::{context_inject, SignalStore};
use crate::tensor::Tensor;

pub const WIRE_VERSION: u32 = 1;

fn wire_version() -> u32 {
    WIRE_VERSION
}

fn default_steps() -> usize {
    1
}

fn default_total() -> usize {
    100
}

fn default_offsets() -> Vec<usize> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    #[serde(default = "wire_version")]
    pub v: u32,
    pub user_id: u64,
    #[serde(default)]
    pub surface: SurfaceId,
    #[serde(default)]
    pub context_item_id: Option<u64>,
    pub mode: GenerationMode,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default = "default_total")]
    pub total_items: usize,
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default = "default_offsets")]
    pub offsets: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Request time; defaults to the newest stored signal.
    #[serde(default)]
    pub now: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseItem {
    pub item_id: u64,
    pub score: f64,
    pub source_embedding_index: usize,
    pub conditions: ConditionSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub signal_ms: f64,
    pub featurize_ms: f64,
    pub generate_ms: f64,
    pub retrieve_ms: f64,
}

impl Timing {
    pub fn total_ms(&self) -> f64 {
        self.signal_ms + self.featurize_ms + self.generate_ms + self.retrieve_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub v: u32,
    pub items: Vec<ResponseItem>,
    /// Deduplication left some embedding short of its budget.
    pub shortfall: bool,
    /// No history and no context: nothing to generate from.
    pub cold_start: bool,
    pub steps: usize,
    pub num_embeddings: usize,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub max_items: usize,
    pub max_steps: usize,
    pub overfetch: usize,
    pub compression_threshold: f64,
    /// Quantize item embeddings to INT8 between the embedder and the model.
    pub int8_transport: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { max_items: 1000, max_steps: 64, overfetch: 4, compression_threshold: 0.9, int8_transport: true }
    }
}

/// Item embedder stage: one row per item, optionally through INT8.
pub fn embed_for_transport(model: &Model, items: &[&ItemFeature], int8: bool) -> Result<Tensor> {
    let mut tape = model.tape();
    let v = embed_items(&mut tape, model.config(), items)?;
    let mut t = tape.value(v).clone();
    if int8 {
        for r in 0..t.rows() {
            let back = dequantize(&quantize_int8(t.row(r))?);
            t.row_mut(r).copy_from_slice(&back);
        }
    }
    Ok(t)
}

/// Sequence inputs for `events`, with item embeddings from
/// [`embed_for_transport`].
pub fn featurize(model: &Model, events: &[InteractionEvent], catalog: &Catalog, int8: bool) -> Result<SequenceInput> {
    let elements = SequenceElement::from_events(events)?;
    let items: Vec<&ItemFeature> = events.iter().map(|e| catalog.require(e.item_id)).collect::<Result<_>>()?;
    let emb = embed_for_transport(model, &items, int8)?;
    let mut tape = model.tape();
    let emb = tape.constant(emb);
    let x = assemble_sequence_tape(&mut tape, model.config(), emb, &elements)?;
    Ok(SequenceInput { inputs: tape.value(x).clone(), elements, item_ids: events.iter().map(|e| e.item_id).collect() })
}

/// Immutable serving snapshot.
pub struct Engine {
    pub model: Model,
    pub catalog: Catalog,
    pub index: ItemIndex,
    pub signals: SignalStore,
    pub config: EngineConfig,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn validate_request(&self, req: &RetrieveRequest) -> Result<()> {
        if req.v != WIRE_VERSION {
            return Err(Error::validation(format!("unsupported wire version {}", req.v)));
        }
        if req.total_items == 0 || req.total_items > self.config.max_items {
            return Err(Error::validation(format!("total_items must be in 1..={}", self.config.max_items)));
        }
        if req.num_steps == 0 || req.num_steps > self.config.max_steps {
            return Err(Error::validation(format!("num_steps must be in 1..={}", self.config.max_steps)));
        }
        Ok(())
    }

    pub fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrieveResponse> {
        self.validate_request(req)?;
        let cfg = self.model.config();
        let context = req.context_item_id.map(|id| self.catalog.require(id)).transpose()?;

        let t = Instant::now();
        let history = self.signals.read(req.user_id, req.now.unwrap_or(i64::MAX), cfg.max_seq_len)?;
        let now = req.now.unwrap_or_else(|| history.last().map_or(0, |e| e.ts));
        let mut events = context_inject(&history, req.user_id, context, req.surface, now)?;
        let drop = events.len().saturating_sub(cfg.max_seq_len);
        events.drain(..drop);
        let mut timing = Timing { signal_ms: ms(t), ..Timing::default() };

        let gen_req = GenerationRequest {
            request_id: req.user_id,
            surface: req.surface,
            mode: req.mode,
            num_steps: req.num_steps,
            budgets: req.budgets.clone(),
            offset_buckets: req.offsets.clone(),
            total_items: req.total_items,
            compression_threshold: self.config.compression_threshold,
            seed: req.seed,
            ..GenerationRequest::default()
        };
        gen_req.validate(cfg)?;
        if events.is_empty() {
            return Ok(RetrieveResponse {
                v: WIRE_VERSION,
                items: Vec::new(),
                shortfall: false,
                cold_start: true,
                steps: 0,
                num_embeddings: 0,
                timing,
            });
        }

        let t = Instant::now();
        let seq = featurize(&self.model, &events, &self.catalog, self.config.int8_transport)?;
        timing.featurize_ms = ms(t);

        let t = Instant::now();
        let (rollout, batch) = plan(&self.model, &seq, &gen_req)?;
        timing.generate_ms = ms(t);

        let t = Instant::now();
        let result = retrieve_for_batch(&self.index, &batch, self.config.overfetch)?;
        timing.retrieve_ms = ms(t);

        Ok(RetrieveResponse {
            v: WIRE_VERSION,
            items: result
                .items
                .into_iter()
                .map(|i| ResponseItem { item_id: i.item_id, score: i.score, source_embedding_index: i.source, conditions: i.conditions })
                .collect(),
            shortfall: result.shortfall,
            cold_start: false,
            steps: rollout.steps,
            num_embeddings: rollout.embeddings.len(),
            timing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::embed_catalog;
    use crate::model::ModelConfig;
    use crate::signals::EventLimits;
    use crate::synth::{generate_world, WorldConfig};

    fn engine(dir: &std::path::Path) -> Engine {
        let world = generate_world(&WorldConfig {
            num_items: 200,
            num_queries: 20,
            num_clusters: 8,
            num_users: 10,
            content_dim: 6,
            action_priors: vec![0.5, 0.3, 0.2],
            ..WorldConfig::default()
        })
        .unwrap();
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let catalog = Catalog::new(world.items.clone()).unwrap();
        let pins: Vec<&ItemFeature> = catalog.pins().collect();
        let index = ItemIndex::build(pins.iter().map(|p| p.item_id).collect(), embed_catalog(&model, &pins).unwrap()).unwrap();
        let cutoff = world.events[world.events.len() / 2].ts;
        let signals = SignalStore::create(dir, &world.events, cutoff, EventLimits { num_actions: 3, num_surfaces: 3 }).unwrap();
        Engine { model, catalog, index, signals, config: EngineConfig::default() }
    }

    fn request(mode: GenerationMode) -> RetrieveRequest {
        RetrieveRequest {
            v: WIRE_VERSION,
            user_id: 3,
            surface: 0,
            context_item_id: None,
            mode,
            budgets: Budgets::from([(0, 0.6), (2, 0.4)]),
            total_items: 40,
            num_steps: 2,
            offsets: vec![0],
            seed: 5,
            now: None,
        }
    }

    #[test]
    fn seeded_requests_repeat_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let a = e.retrieve(&request(GenerationMode::Oc)).unwrap();
        let b = e.retrieve(&request(GenerationMode::Oc)).unwrap();
        assert_eq!(a.items, b.items);
        assert!(!a.items.is_empty());
        let ids: std::collections::HashSet<u64> = a.items.iter().map(|i| i.item_id).collect();
        assert_eq!(ids.len(), a.items.len());
    }

    #[test]
    fn single_action_budget_gives_single_action_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let req = RetrieveRequest { budgets: Budgets::from([(1, 1.0)]), ..request(GenerationMode::Oc) };
        let r = e.retrieve(&req).unwrap();
        assert!(r.items.iter().all(|i| i.conditions.action == Some(1)));
        assert!(r.items.len() <= 40);
    }

    #[test]
    fn unknown_user_without_context_is_a_cold_start() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let r = e.retrieve(&RetrieveRequest { user_id: 999, ..request(GenerationMode::Uc) }).unwrap();
        assert!(r.cold_start && r.items.is_empty());
        // With a closeup pin as context, generation runs from the context alone.
        let pin = e.catalog.pins().next().unwrap().item_id;
        let req = RetrieveRequest { user_id: 999, surface: 2, context_item_id: Some(pin), ..request(GenerationMode::Uc) };
        let r = e.retrieve(&req).unwrap();
        assert!(!r.cold_start && !r.items.is_empty());
    }

    #[test]
    fn malformed_requests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        for bad in [
            RetrieveRequest { total_items: 0, ..request(GenerationMode::Oc) },
            RetrieveRequest { total_items: 5000, ..request(GenerationMode::Oc) },
            RetrieveRequest { budgets: Budgets::from([(0, 0.5)]), ..request(GenerationMode::Oc) },
            RetrieveRequest { v: 9, ..request(GenerationMode::Oc) },
            RetrieveRequest { context_item_id: Some(u64::MAX), ..request(GenerationMode::Oc) },
        ] {
            assert!(matches!(e.retrieve(&bad), Err(Error::Validation(_))), "{bad:?}");
        }
    }

    #[test]
    fn int8_transport_stays_close_to_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(dir.path());
        let items: Vec<&ItemFeature> = e.catalog.items().iter().take(20).collect();
        let a = embed_for_transport(&e.model, &items, false).unwrap();
        let b = embed_for_transport(&e.model, &items, true).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 0.5 / 127.0 + 1e-12);
        }
    }
}
