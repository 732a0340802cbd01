//! Rollouts over a per-request KV cache.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{allocate_budget, compress_embeddings, EmbeddingBatch, GenerationMode, GenerationRequest};
use crate::error::{Error, Result};
use crate::features::{assemble_sequence_tape, project_feedback, seeded_hash, SequenceElement, SequenceInput};
use crate::model::{ConditionSet, KvCache, Model, OutputEmbedding};
use crate::tensor::Tensor;

/// Generated embeddings in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub embeddings: Vec<OutputEmbedding>,
    pub steps: usize,
}

fn step_conditions(req: &GenerationRequest) -> Vec<ConditionSet> {
    if let Some(c) = &req.conditions {
        return c.clone();
    }
    let s = Some(req.surface);
    match req.mode {
        GenerationMode::Uc => vec![ConditionSet::NULL],
        // "Immediately next" for heads that also read an offset.
        GenerationMode::Oc => req.actions().into_iter().map(|a| ConditionSet::new(Some(a), s, Some(0))).collect(),
        GenerationMode::MtOc => req
            .offset_buckets
            .iter()
            .flat_map(|&o| req.actions().into_iter().map(move |a| ConditionSet::new(Some(a), s, Some(o))))
            .collect(),
    }
}

/// Index of the embedding that is fed back: among the conditions with the
/// smallest offset bucket, one action is drawn from the request's weights.
fn continuation(req: &GenerationRequest, conds: &[ConditionSet], step: usize) -> usize {
    let first_offset = conds.iter().map(|c| c.offset_bucket).min().flatten();
    let candidates: Vec<usize> = (0..conds.len()).filter(|&i| conds[i].offset_bucket == first_offset).collect();
    let weights_src = req.action_weights.as_ref().unwrap_or(&req.budgets);
    let weights: Vec<f64> =
        candidates.iter().map(|&i| conds[i].action.and_then(|a| weights_src.get(&a).copied()).unwrap_or(0.0)).collect();
    let Ok(dist) = WeightedIndex::new(&weights) else {
        return candidates[0];
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(req.request_id, req.seed));
    rng.set_stream(step as u64);
    candidates[dist.sample(&mut rng)]
}

/// Runs `req.num_steps` autoregressive steps after the given history.
///
/// Only the most recent `max_seq_len` history positions are used. When the
/// appended tokens overflow the context, the oldest positions are dropped
/// and the cache is rebuilt from the remaining window.
pub fn generate(model: &Model, history: &SequenceInput, req: &GenerationRequest) -> Result<Rollout> {
    let cfg = model.config();
    req.validate(cfg)?;
    if history.is_empty() {
        return Err(Error::validation("generation needs at least one history event"));
    }
    let conds = step_conditions(req);
    if conds.is_empty() {
        return Err(Error::validation("no conditions to generate for"));
    }
    let keep = history.len().min(cfg.max_seq_len);
    let mut window = history.inputs.slice_rows(history.len() - keep, keep);
    let mut cache = KvCache::new(cfg);
    let mut h = model.forward_incremental(&mut cache, &window)?;
    let gap = cfg.generation_offset_secs;
    let mut t_last = history.elements.last().map_or(0.0, |e| e.t_abs);
    let mut embeddings = Vec::with_capacity(req.num_steps * conds.len());

    for step in 0..req.num_steps {
        let last = h.last().expect("non-empty window");
        let out = model.output_heads(last, &conds)?;
        for (i, c) in conds.iter().enumerate() {
            embeddings.push(OutputEmbedding { vector: out.row(i).to_vec(), conditions: *c, step });
        }
        if step + 1 == req.num_steps {
            break;
        }
        let chosen = continuation(req, &conds, step);
        t_last += gap;
        let next_input = {
            let mut tape = model.tape();
            let v = tape.constant(Tensor::row_vector(out.row(chosen).to_vec()));
            let item = project_feedback(&mut tape, v);
            let elem = SequenceElement { surface: req.surface, t_abs: t_last, dt: gap };
            let x = assemble_sequence_tape(&mut tape, cfg, item, &[elem])?;
            tape.value(x).clone()
        };
        if cache.len() == cfg.max_seq_len {
            window = window.slice_rows(1, window.rows() - 1);
            window.push_rows(&next_input);
            cache.clear();
            h = model.forward_incremental(&mut cache, &window)?;
        } else {
            window.push_rows(&next_input);
            h = model.forward_incremental(&mut cache, &next_input)?;
        }
    }
    Ok(Rollout { embeddings, steps: req.num_steps })
}

fn require_mode(req: &GenerationRequest, mode: GenerationMode) -> Result<()> {
    if req.mode != mode {
        return Err(Error::validation(format!("request mode {:?} does not match {mode:?}", req.mode)));
    }
    Ok(())
}

pub fn rollout_unconditional(model: &Model, history: &SequenceInput, req: &GenerationRequest) -> Result<Rollout> {
    require_mode(req, GenerationMode::Uc)?;
    generate(model, history, req)
}

pub fn rollout_outcome_conditioned(model: &Model, history: &SequenceInput, req: &GenerationRequest) -> Result<Rollout> {
    require_mode(req, GenerationMode::Oc)?;
    if req.actions().is_empty() {
        return Err(Error::validation("outcome-conditioned generation needs at least one action"));
    }
    generate(model, history, req)
}

pub fn rollout_multi_token(model: &Model, history: &SequenceInput, req: &GenerationRequest) -> Result<Rollout> {
    require_mode(req, GenerationMode::MtOc)?;
    generate(model, history, req)
}

/// Rollout, budget allocation and compression.
pub fn plan(model: &Model, history: &SequenceInput, req: &GenerationRequest) -> Result<(Rollout, EmbeddingBatch)> {
    let rollout = generate(model, history, req)?;
    let budgets = match req.mode {
        GenerationMode::Uc => None,
        _ => Some(&req.budgets),
    };
    let alloc = allocate_budget(&rollout.embeddings, budgets, req.total_items)?;
    let batch = EmbeddingBatch::new(rollout.embeddings.clone(), alloc);
    Ok((rollout, compress_embeddings(&batch, req.compression_threshold)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Catalog, InteractionEvent, ItemFeature, ItemType};
    use crate::features::{assemble_sequence, encode_time};
    use crate::generation::Budgets;
    use crate::model::{ModelConfig, FEEDBACK_PARAM};
    use crate::tensor::l2_norm;

    fn setup(len: usize) -> (Model, SequenceInput) {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let catalog = Catalog::new(
            (0..10)
                .map(|i| ItemFeature {
                    item_id: i,
                    item_type: ItemType::Pin,
                    content: (0..6).map(|k| ((i * 5 + k) as f32).sin()).collect(),
                })
                .collect(),
        )
        .unwrap();
        let events: Vec<_> = (0..len)
            .map(|i| InteractionEvent { user_id: 1, item_id: i as u64 % 10, action: i % 3, surface: 0, ts: 1000 + 60 * i as i64, feed_id: 0 })
            .collect();
        let seq = assemble_sequence(&model, &events, &catalog).unwrap();
        (model, seq)
    }

    fn oc(actions: &[(usize, f64)], n: usize) -> GenerationRequest {
        GenerationRequest { mode: GenerationMode::Oc, num_steps: n, budgets: actions.iter().copied().collect(), ..Default::default() }
    }

    #[test]
    fn single_step_unconditional() {
        let (m, seq) = setup(4);
        let r = rollout_unconditional(&m, &seq, &GenerationRequest::default()).unwrap();
        assert_eq!(r.embeddings.len(), 1);
        assert!((l2_norm(&r.embeddings[0].vector) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let (m, seq) = setup(5);
        let req = GenerationRequest { num_steps: 3, ..Default::default() };
        assert_eq!(generate(&m, &seq, &req).unwrap(), generate(&m, &seq, &req).unwrap());
        let req = GenerationRequest { num_steps: 3, seed: 9, ..oc(&[(0, 0.5), (2, 0.5)], 3) };
        assert_eq!(generate(&m, &seq, &req).unwrap(), generate(&m, &seq, &req).unwrap());
    }

    #[test]
    fn outcome_conditioned_counts() {
        let (m, seq) = setup(3);
        let r = rollout_outcome_conditioned(&m, &seq, &oc(&[(0, 0.6), (1, 0.4)], 3)).unwrap();
        assert_eq!(r.embeddings.len(), 6);
        assert!(rollout_outcome_conditioned(&m, &seq, &GenerationRequest { mode: GenerationMode::Oc, ..Default::default() }).is_err());
    }

    #[test]
    fn multi_token_counts_and_degenerate_case() {
        let (m, seq) = setup(3);
        let mt = GenerationRequest { mode: GenerationMode::MtOc, offset_buckets: vec![0, 1, 2, 3], ..oc(&[(1, 1.0)], 4) };
        assert_eq!(rollout_multi_token(&m, &seq, &mt).unwrap().embeddings.len(), 16);
        let one = GenerationRequest { mode: GenerationMode::MtOc, offset_buckets: vec![0], ..oc(&[(1, 1.0)], 16) };
        assert_eq!(rollout_multi_token(&m, &seq, &one).unwrap().embeddings.len(), 16);

        let mt0 = GenerationRequest { mode: GenerationMode::MtOc, offset_buckets: vec![0], ..oc(&[(0, 0.5), (1, 0.5)], 3) };
        let a = rollout_multi_token(&m, &seq, &mt0).unwrap();
        let b = rollout_outcome_conditioned(&m, &seq, &oc(&[(0, 0.5), (1, 0.5)], 3)).unwrap();
        assert_eq!(a, b);
        let bad = GenerationRequest { offset_buckets: vec![9], ..mt0 };
        assert!(generate(&m, &seq, &bad).is_err());
    }

    #[test]
    fn point_mass_weights_pick_that_action() {
        let (m, seq) = setup(3);
        let req = GenerationRequest { action_weights: Some(Budgets::from([(2, 1.0)])), ..oc(&[(0, 0.5), (2, 0.5)], 4) };
        let conds = step_conditions(&req);
        for step in 0..10 {
            assert_eq!(conds[continuation(&req, &conds, step)].action, Some(2));
        }
        assert!(generate(&m, &seq, &req).is_ok());
    }

    #[test]
    fn unconditional_equals_single_null_condition() {
        let (m, seq) = setup(4);
        let uc = GenerationRequest { num_steps: 3, ..Default::default() };
        let explicit = GenerationRequest { conditions: Some(vec![ConditionSet::NULL]), ..uc.clone() };
        assert_eq!(generate(&m, &seq, &uc).unwrap(), generate(&m, &seq, &explicit).unwrap());
    }

    #[test]
    fn appended_token_uses_the_fixed_offset() {
        let (m, seq) = setup(4);
        let req = GenerationRequest { num_steps: 2, ..Default::default() };
        let r = generate(&m, &seq, &req).unwrap();
        // Rebuild the second step by hand from featurization primitives.
        let cfg = m.config();
        let t_last = seq.elements.last().unwrap().t_abs;
        let phases = m.params().get(m.params().expect(crate::features::PHASE_PARAM)).data().to_vec();
        let enc = encode_time(t_last + 10.0, 10.0, &cfg.features.temporal, &phases).unwrap();
        let w = m.params().get(m.params().expect(FEEDBACK_PARAM));
        let item = crate::tensor::normalized(Tensor::row_vector(r.embeddings[0].vector.clone()).matmul(w).data());
        let mut x: Vec<f64> = item;
        x.extend(enc);
        let proj = Tensor::row_vector(x).matmul(m.params().get(m.params().expect("input.proj.w")));
        let bias = m.params().get(m.params().expect("input.proj.b"));
        let surf = m.params().get(m.params().expect("input.surface")).row(0);
        let row: Vec<f64> = proj.data().iter().zip(bias.data()).zip(surf).map(|((a, b), c)| a + b + c).collect();
        let mut full = seq.inputs.clone();
        full.push_rows(&Tensor::row_vector(row));
        let h = m.forward(&full).unwrap();
        let expect = m.output_head(h.last().unwrap(), &ConditionSet::NULL).unwrap();
        for (a, b) in expect.iter().zip(&r.embeddings[1].vector) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn long_rollouts_slide_the_window() {
        let (m, seq) = setup(16);
        let req = GenerationRequest { num_steps: 5, ..Default::default() };
        let r = generate(&m, &seq, &req).unwrap();
        assert_eq!(r.embeddings.len(), 5);
        assert!(r.embeddings.iter().all(|e| e.vector.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn plan_conserves_budget() {
        let (m, seq) = setup(6);
        let req = GenerationRequest { total_items: 50, ..oc(&[(0, 0.6), (1, 0.4)], 3) };
        let (_, batch) = plan(&m, &seq, &req).unwrap();
        assert_eq!(batch.total_budget(), 50);
    }

    #[test]
    fn head_that_ignores_actions_collapses_under_compression() {
        let (mut m, seq) = setup(4);
        let id = m.params().expect("head.cond.action");
        let table = m.params_mut().get_mut(id);
        let first = table.row(0).to_vec();
        for r in 0..table.rows() {
            table.row_mut(r).copy_from_slice(&first);
        }
        let req = GenerationRequest { total_items: 30, ..oc(&[(0, 0.5), (1, 0.3), (2, 0.2)], 2) };
        let (rollout, batch) = plan(&m, &seq, &req).unwrap();
        for step in rollout.embeddings.chunks(3) {
            assert_eq!(step[0].vector, step[1].vector);
            assert_eq!(step[0].vector, step[2].vector);
        }
        assert!(batch.len() <= 2);
        assert_eq!(batch.total_budget(), 30);
    }
}
