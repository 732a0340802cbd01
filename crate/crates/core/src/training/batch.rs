//! Batch preparation (targets, negatives, logQ) and the batch losses.

use std::collections::HashMap;

use rand::Rng;

use super::{sample_multi_token_targets, feed_target_set, CountMinSketch, LossMode, TrainingConfig};
use crate::error::{Error, Result};
use crate::events::{check_chronological, Catalog, InteractionEvent, ItemFeature, ItemType};
use crate::features::{assemble_sequence_tape, embed_items, project_feedback, SequenceElement};
use crate::model::{head, transformer, ConditionSet, Model, ModelConfig, LAMBDA_PARAM};
use crate::tape::{SampledSoftmaxSpec, Tape, Var};
use crate::tensor::Tensor;

/// Candidate items shared by every prediction of a batch. Each prediction
/// excludes candidates carrying its own target's id.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    /// Target items of every position in the batch, duplicates kept.
    pub in_batch: Vec<u64>,
    /// Uniform draws (with replacement) from the pin catalog.
    pub random: Vec<u64>,
}

impl NegativeSet {
    pub fn candidates(&self) -> impl Iterator<Item = u64> + '_ {
        self.in_batch.iter().chain(&self.random).copied()
    }

    /// The negatives a prediction with target `target` is scored against.
    pub fn for_target(&self, target: u64) -> impl Iterator<Item = u64> + '_ {
        self.candidates().filter(move |&c| c != target)
    }
}

/// In-batch pool plus `num_random` uniform pins.
pub fn build_negatives<R: Rng>(
    sequences: &[Vec<InteractionEvent>],
    catalog: &Catalog,
    pins: &[u64],
    num_random: usize,
    rng: &mut R,
) -> Result<NegativeSet> {
    if pins.is_empty() {
        return Err(Error::validation("catalog has no pins to sample negatives from"));
    }
    let mut in_batch = Vec::new();
    for seq in sequences {
        for e in seq.iter().skip(1) {
            if catalog.require(e.item_id)?.item_type == ItemType::Pin {
                in_batch.push(e.item_id);
            }
        }
    }
    let random = (0..num_random).map(|_| pins[rng.random_range(0..pins.len())]).collect();
    Ok(NegativeSet { in_batch, random })
}

#[derive(Clone, Debug)]
struct PositionTargets {
    seq: usize,
    pos: usize,
    /// Candidate index of the next item when it is a pin.
    next: Option<usize>,
    /// Candidate indices of the feed-session target set.
    feed: Vec<usize>,
    /// Additional sampled future targets (never the next position).
    extra: Vec<usize>,
}

/// A fully specified training batch; all randomness has been drawn.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub sequences: Vec<Vec<InteractionEvent>>,
    pub negatives: NegativeSet,
    /// `log Q` per candidate, in `negatives.candidates()` order.
    pub log_q: Vec<f64>,
    /// `(seq, pos)` of each in-batch candidate.
    pool: Vec<(usize, usize)>,
    positions: Vec<PositionTargets>,
}

impl PreparedBatch {
    pub fn num_positions(&self) -> usize {
        self.positions.len()
    }

    /// Number of next-token targets in the batch.
    pub fn num_next_targets(&self) -> usize {
        self.positions.iter().filter(|p| p.next.is_some()).count()
    }
}

/// Builds a batch. The sketch is updated with the batch's target items before
/// the sampling probabilities are read.
pub fn prepare_batch<R: Rng>(
    sequences: Vec<Vec<InteractionEvent>>,
    catalog: &Catalog,
    pins: &[u64],
    cfg: &TrainingConfig,
    model_cfg: &ModelConfig,
    sketch: &mut CountMinSketch,
    rng: &mut R,
) -> Result<PreparedBatch> {
    for seq in &sequences {
        check_chronological(seq)?;
        if seq.len() > model_cfg.max_seq_len {
            return Err(Error::Length { len: seq.len(), max: model_cfg.max_seq_len });
        }
    }
    let negatives = build_negatives(&sequences, catalog, pins, cfg.num_random_negatives, rng)?;
    let mut pool = Vec::with_capacity(negatives.in_batch.len());
    let mut cand_of: HashMap<(usize, usize), usize> = HashMap::new();
    for (s, seq) in sequences.iter().enumerate() {
        for p in 1..seq.len() {
            if catalog.require(seq[p].item_id)?.item_type == ItemType::Pin {
                cand_of.insert((s, p), pool.len());
                pool.push((s, p));
            }
        }
    }
    for &id in &negatives.in_batch {
        sketch.update(id);
    }
    let log_q = negatives.candidates().map(|id| sketch.log_q(id)).collect();

    let mut positions = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        let ts: Vec<i64> = seq.iter().map(|e| e.ts).collect();
        for t in 0..seq.len().saturating_sub(1) {
            let next = cand_of.get(&(s, t + 1)).copied();
            let feed = feed_target_set(seq, t).into_iter().filter_map(|j| cand_of.get(&(s, j)).copied()).collect();
            let extra = sample_multi_token_targets(&ts, t, cfg.multi_token_k, cfg.multi_token_window, model_cfg, rng)
                .into_iter()
                .filter(|&(j, _)| j != t + 1)
                .filter_map(|(j, _)| cand_of.get(&(s, j)).copied())
                .collect();
            positions.push(PositionTargets { seq: s, pos: t, next, feed, extra });
        }
    }
    Ok(PreparedBatch { sequences, negatives, log_q, pool, positions })
}

#[derive(Clone, Copy, Debug)]
struct Row {
    seq: usize,
    pos: usize,
    cand: usize,
    next: bool,
}

fn loss_rows(batch: &PreparedBatch, mode: LossMode) -> (Vec<Row>, Vec<Vec<usize>>) {
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for p in &batch.positions {
        let row = |cand, next| Row { seq: p.seq, pos: p.pos, cand, next };
        match mode {
            LossMode::NextToken => {
                if let Some(c) = p.next {
                    groups.push(vec![rows.len()]);
                    rows.push(row(c, true));
                }
            }
            LossMode::FeedRelaxed => {
                if !p.feed.is_empty() {
                    let mut g = Vec::with_capacity(p.feed.len());
                    for &c in &p.feed {
                        g.push(rows.len());
                        rows.push(row(c, Some(c) == p.next));
                    }
                    groups.push(g);
                }
            }
        }
        for &c in &p.extra {
            groups.push(vec![rows.len()]);
            rows.push(row(c, false));
        }
    }
    (rows, groups)
}

/// Loss nodes of one batch on a tape.
pub(crate) struct BatchLoss {
    /// Mean sampled-softmax loss over loss groups.
    pub main: Var,
    /// Main loss plus the weighted feedback-adapter regression.
    pub total: Var,
    pub num_groups: usize,
}

pub(crate) fn batch_loss_on_tape(
    tape: &mut Tape<'_>,
    model: &Model,
    catalog: &Catalog,
    batch: &PreparedBatch,
    mode: LossMode,
    aux_weight: f64,
) -> Result<BatchLoss> {
    let cfg = model.config();
    let (rows, groups) = loss_rows(batch, mode);
    if rows.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(BatchLoss { main: zero, total: zero, num_groups: 0 });
    }

    let mut unique: Vec<u64> = batch.sequences.iter().flatten().map(|e| e.item_id).chain(batch.negatives.random.iter().copied()).collect();
    unique.sort_unstable();
    unique.dedup();
    let index: HashMap<u64, usize> = unique.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let items: Vec<&ItemFeature> = unique.iter().map(|&id| catalog.require(id)).collect::<Result<_>>()?;
    let emb = embed_items(tape, cfg, &items)?;

    let mut hidden = Vec::with_capacity(batch.sequences.len());
    let mut offsets = Vec::with_capacity(batch.sequences.len());
    let mut total_len = 0;
    for seq in &batch.sequences {
        offsets.push(total_len);
        total_len += seq.len();
        if seq.is_empty() {
            continue;
        }
        let idx: Vec<usize> = seq.iter().map(|e| index[&e.item_id]).collect();
        let x = tape.select_rows(emb, &idx);
        let x = assemble_sequence_tape(tape, cfg, x, &SequenceElement::from_events(seq)?)?;
        hidden.push(transformer(tape, cfg, x, None)?);
    }
    let h_all = tape.concat_rows(&hidden);

    let src: Vec<usize> = rows.iter().map(|r| offsets[r.seq] + r.pos).collect();
    let conds: Vec<ConditionSet> = rows
        .iter()
        .map(|r| {
            let (s, p) = batch.pool[r.cand];
            let target = &batch.sequences[s][p];
            let gap = (target.ts - batch.sequences[r.seq][r.pos].ts) as f64;
            let c = ConditionSet::new(Some(target.action), Some(target.surface), Some(cfg.offset_bucket(gap)));
            cfg.conditioning.apply(c)
        })
        .collect();
    let h = tape.select_rows(h_all, &src);
    let preds = head(tape, cfg, h, &conds)?;

    let cand_ids: Vec<u64> = batch.negatives.candidates().collect();
    let cand_rows: Vec<usize> = cand_ids.iter().map(|id| index[id]).collect();
    let cands = tape.select_rows(emb, &cand_rows);
    let raw = tape.param_by_name(LAMBDA_PARAM);
    let lambda = tape.softplus(raw);
    let spec = SampledSoftmaxSpec { cand_ids, log_q: batch.log_q.clone(), targets: rows.iter().map(|r| r.cand).collect() };
    let losses = tape.sampled_softmax(preds, cands, lambda, spec);
    let per_group = tape.group_min(losses, &groups);
    let main = tape.mean(per_group);

    // The feedback adapter learns to map a next-item prediction onto that
    // item's embedding; both sides are detached from the rest of the model.
    let next_rows: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].next).collect();
    let total = if aux_weight > 0.0 && !next_rows.is_empty() {
        let p = tape.value(preds).select_rows(&next_rows);
        let target_rows: Vec<usize> = next_rows.iter().map(|&i| cand_rows[rows[i].cand]).collect();
        let target = tape.value(emb).select_rows(&target_rows);
        let p = tape.constant(p);
        let target = tape.constant(target);
        let mapped = project_feedback(tape, p);
        let diff = tape.sub(mapped, target);
        let sq = tape.sum_squares(diff);
        let aux = tape.scale(sq, aux_weight / next_rows.len() as f64);
        tape.add(main, aux)
    } else {
        main
    };
    Ok(BatchLoss { main, total, num_groups: groups.len() })
}

fn evaluate(model: &Model, catalog: &Catalog, batch: &PreparedBatch, mode: LossMode) -> Result<f64> {
    let mut tape = model.tape();
    let loss = batch_loss_on_tape(&mut tape, model, catalog, batch, mode, 0.0)?;
    Ok(tape.value(loss.main).scalar_value())
}

/// Mean next-item sampled-softmax loss (plus any sampled multi-token terms).
pub fn next_token_loss(model: &Model, catalog: &Catalog, batch: &PreparedBatch) -> Result<f64> {
    evaluate(model, catalog, batch, LossMode::NextToken)
}

/// Like [`next_token_loss`] but each position takes the minimum loss over
/// the items of the next item's feed session.
pub fn feed_relaxed_loss(model: &Model, catalog: &Catalog, batch: &PreparedBatch) -> Result<f64> {
    evaluate(model, catalog, batch, LossMode::FeedRelaxed)
}
