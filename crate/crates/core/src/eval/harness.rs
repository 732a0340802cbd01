use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{proportion_unique, target_hits, EvalSpec};
use crate::error::{Error, Result};
use crate::events::{ActionId, Catalog, InteractionEvent, ItemFeature, ItemType, SurfaceId};
use crate::features::{assemble_sequence, embed_catalog, SequenceInput};
use crate::generation::{generate, steps_for, Budgets, GenerationMode, GenerationRequest};
use crate::index::ItemIndex;
use crate::model::{ConditionSet, Model, ModelConfig};
use crate::tensor::Tensor;

/// One held-out user: the history before the cutoff and the pin
/// engagements after it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user_id: u64,
    /// Surface of the first target, used for the generation request.
    pub surface: SurfaceId,
    pub history: Vec<InteractionEvent>,
    pub targets: Vec<InteractionEvent>,
}

impl EvalCase {
    /// Cutoff at the `n`-th last pin engagement; events after it never
    /// reach the model. `None` when no history would remain.
    pub fn from_history(events: &[InteractionEvent], catalog: &Catalog, n: usize) -> Option<EvalCase> {
        let pins: Vec<usize> = (0..events.len())
            .filter(|&i| catalog.get(events[i].item_id).is_some_and(|f| f.item_type == ItemType::Pin))
            .collect();
        let first = pins.len().saturating_sub(n);
        let cutoff = *pins[first..].iter().find(|&&i| i > 0)?;
        let targets: Vec<InteractionEvent> = pins.iter().filter(|&&i| i >= cutoff).map(|&i| events[i]).collect();
        Some(EvalCase { user_id: events[0].user_id, surface: targets[0].surface, history: events[..cutoff].to_vec(), targets })
    }
}

/// Per-user result of one generation mode.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub user_id: u64,
    pub surface: SurfaceId,
    pub target_actions: Vec<ActionId>,
    pub hits: Vec<bool>,
    /// The user's top-k items from the full pin index.
    pub retrieved: Vec<u64>,
    pub num_embeddings: usize,
}

impl CaseOutcome {
    pub fn recall(&self) -> f64 {
        self.hits.iter().filter(|&&h| h).count() as f64 / self.hits.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub users: usize,
    /// Mean over users of per-user unordered recall.
    pub recall: f64,
    pub prop_unique: f64,
}

pub fn summarize(outcomes: &[CaseOutcome]) -> Result<ModeSummary> {
    if outcomes.is_empty() {
        return Err(Error::validation("no evaluation users"));
    }
    let recall = outcomes.iter().map(CaseOutcome::recall).sum::<f64>() / outcomes.len() as f64;
    let sets: Vec<Vec<u64>> = outcomes.iter().map(|o| o.retrieved.clone()).collect();
    Ok(ModeSummary { users: outcomes.len(), recall, prop_unique: proportion_unique(&sets)? })
}

/// Item embeddings of one model for every catalog pin.
struct ModelView<'m> {
    model: &'m Model,
    index: ItemIndex,
    row_of: std::collections::HashMap<u64, usize>,
}

impl<'m> ModelView<'m> {
    fn new(model: &'m Model, pins: &[&ItemFeature]) -> Result<Self> {
        let vectors = embed_catalog(model, pins)?;
        let ids: Vec<u64> = pins.iter().map(|p| p.item_id).collect();
        let row_of = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(ModelView { model, index: ItemIndex::build(ids, vectors)?, row_of })
    }

    fn rows(&self, ids: &[u64]) -> Tensor {
        let rows: Vec<usize> = ids.iter().map(|id| self.row_of[id]).collect();
        self.index.vectors().select_rows(&rows)
    }
}

pub struct Evaluator<'a> {
    catalog: &'a Catalog,
    spec: EvalSpec,
    cases: Vec<EvalCase>,
    pins: Vec<&'a ItemFeature>,
    negatives: Vec<u64>,
}

impl<'a> Evaluator<'a> {
    /// `histories` are the held-out users' full chronological histories.
    pub fn new(catalog: &'a Catalog, histories: &[Vec<InteractionEvent>], spec: EvalSpec) -> Result<Self> {
        spec.validate()?;
        let mut cases: Vec<EvalCase> = histories
            .iter()
            .filter(|h| !h.is_empty())
            .filter_map(|h| EvalCase::from_history(h, catalog, spec.targets_per_user))
            .collect();
        if spec.max_users > 0 {
            cases.truncate(spec.max_users);
        }
        if cases.is_empty() {
            return Err(Error::validation("no held-out user has both history and targets"));
        }
        let pins: Vec<&ItemFeature> = catalog.pins().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.num_negatives.min(pins.len());
        let mut negatives: Vec<u64> = pins.choose_multiple(&mut rng, n).map(|p| p.item_id).collect();
        negatives.sort_unstable();
        Ok(Evaluator { catalog, spec, cases, pins, negatives })
    }

    pub fn cases(&self) -> &[EvalCase] {
        &self.cases
    }

    pub fn spec(&self) -> &EvalSpec {
        &self.spec
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }

    /// Expected recall@k of a single random prediction, `k / |negatives|`.
    pub fn random_baseline(&self) -> f64 {
        (self.spec.k as f64 / self.negatives.len() as f64).min(1.0)
    }

    fn sequence(&self, model: &Model, case: &EvalCase) -> Result<SequenceInput> {
        let max = model.config().max_seq_len;
        let start = case.history.len().saturating_sub(max);
        assemble_sequence(model, &case.history[start..], self.catalog)
    }

    /// Generates for every case with `request(case)` and scores the result.
    /// Cases run in parallel; each sees only its own history.
    pub fn run<F>(&self, model: &Model, request: F) -> Result<Vec<CaseOutcome>>
    where
        F: Fn(&EvalCase) -> GenerationRequest + Sync,
    {
        self.run_limited(model, request, usize::MAX)
    }

    /// As [`Evaluator::run`], scoring only the first `limit` embeddings.
    pub fn run_limited<F>(&self, model: &Model, request: F, limit: usize) -> Result<Vec<CaseOutcome>>
    where
        F: Fn(&EvalCase) -> GenerationRequest + Sync,
    {
        let view = ModelView::new(model, &self.pins)?;
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(self.cases.len());
        let chunk = self.cases.len().div_ceil(threads);
        let results: Vec<Result<Vec<CaseOutcome>>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .cases
                .chunks(chunk)
                .map(|cases| {
                    let view = &view;
                    let request = &request;
                    s.spawn(move || cases.iter().map(|c| self.score(view, c, request(c), limit)).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        Ok(results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
    }

    fn score(&self, view: &ModelView<'_>, case: &EvalCase, req: GenerationRequest, limit: usize) -> Result<CaseOutcome> {
        let seq = self.sequence(view.model, case)?;
        let mut rollout = generate(view.model, &seq, &req)?;
        rollout.embeddings.truncate(limit);
        let preds = Tensor::from_rows(&rollout.embeddings.iter().map(|e| e.vector.as_slice()).collect::<Vec<_>>(), view.model.config().output_dim);
        let target_ids: Vec<u64> = case.targets.iter().map(|e| e.item_id).collect();
        let exclude: HashSet<u64> = target_ids.iter().copied().collect();
        let neg_ids: Vec<u64> = self.negatives.iter().copied().filter(|id| !exclude.contains(id)).collect();
        let hits = target_hits(&preds, &view.rows(&target_ids), &view.rows(&neg_ids), self.spec.k);
        let retrieved = merged_top_k(&view.index, &preds, self.spec.k)?;
        Ok(CaseOutcome {
            user_id: case.user_id,
            surface: case.surface,
            target_actions: case.targets.iter().map(|e| e.action).collect(),
            hits,
            retrieved,
            num_embeddings: preds.rows(),
        })
    }

    /// Serial wall-clock of generation (sequence assembly excluded) over all
    /// cases; the minimum over `repeats` runs.
    pub fn time_generation<F>(&self, model: &Model, request: F, repeats: usize) -> Result<Duration>
    where
        F: Fn(&EvalCase) -> GenerationRequest,
    {
        let seqs: Vec<SequenceInput> = self.cases.iter().map(|c| self.sequence(model, c)).collect::<Result<_>>()?;
        let reqs: Vec<GenerationRequest> = self.cases.iter().map(request).collect();
        let mut best = Duration::MAX;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            for (seq, req) in seqs.iter().zip(&reqs) {
                std::hint::black_box(generate(model, seq, req)?);
            }
            best = best.min(start.elapsed());
        }
        Ok(best)
    }
}

/// The user's top `k` items over the whole index: every prediction's
/// neighbours merged, each item scored by its best prediction.
fn merged_top_k(index: &ItemIndex, preds: &Tensor, k: usize) -> Result<Vec<u64>> {
    let mut best: std::collections::HashMap<u64, f64> = Default::default();
    for p in preds.iter_rows() {
        for n in index.knn(p, k, 1)? {
            let e = best.entry(n.item_id).or_insert(f64::NEG_INFINITY);
            *e = e.max(n.score);
        }
    }
    let mut items: Vec<(u64, f64)> = best.into_iter().collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(items.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Recall of OC generation conditioned on each action relative to UC,
/// stratified by the targets' true action.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftMatrix {
    /// Pooled UC recall over targets with true action `b`.
    pub uc_recall: Vec<Option<f64>>,
    /// `oc_recall[a][b]`: conditioned on `a`, targets with true action `b`.
    pub oc_recall: Vec<Vec<Option<f64>>>,
    /// `oc / uc - 1`; absent for empty strata or zero UC recall.
    pub lift: Vec<Vec<Option<f64>>>,
}

impl LiftMatrix {
    pub fn num_actions(&self) -> usize {
        self.uc_recall.len()
    }

    pub fn diagonal_mean(&self) -> Option<f64> {
        let d: Vec<f64> = (0..self.num_actions()).filter_map(|a| self.lift[a][a]).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Every present diagonal entry exceeds every present off-diagonal entry
    /// of its row.
    pub fn diagonal_dominant(&self) -> bool {
        (0..self.num_actions()).all(|a| match self.lift[a][a] {
            None => false,
            Some(d) => (0..self.num_actions()).filter(|&b| b != a).all(|b| self.lift[a][b].is_none_or(|x| d > x)),
        })
    }
}

fn stratified(outcomes: &[CaseOutcome], num_actions: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_actions];
    let mut total = vec![0usize; num_actions];
    for o in outcomes {
        for (&a, &h) in o.target_actions.iter().zip(&o.hits) {
            if a < num_actions {
                total[a] += 1;
                hits[a] += h as usize;
            }
        }
    }
    (0..num_actions).map(|a| (total[a] > 0).then(|| hits[a] as f64 / total[a] as f64)).collect()
}

pub fn conditioned_lift_matrix(evaluator: &Evaluator<'_>, model_oc: &Model, model_uc: &Model) -> Result<LiftMatrix> {
    let na = model_oc.config().num_actions;
    let steps = evaluator.spec().num_steps;
    let uc = evaluator.run(model_uc, |c| GenerationRequest {
        request_id: c.user_id,
        surface: c.surface,
        num_steps: steps,
        ..GenerationRequest::default()
    })?;
    let uc_recall = stratified(&uc, na);
    let mut oc_recall = Vec::with_capacity(na);
    for a in 0..na {
        let out = evaluator.run(model_oc, |c| GenerationRequest {
            request_id: c.user_id,
            surface: c.surface,
            mode: GenerationMode::Oc,
            num_steps: steps,
            budgets: Budgets::from([(a, 1.0)]),
            ..GenerationRequest::default()
        })?;
        oc_recall.push(stratified(&out, na));
    }
    let lift = oc_recall
        .iter()
        .map(|row| {
            row.iter()
                .zip(&uc_recall)
                .map(|(oc, uc)| match (oc, uc) {
                    (Some(o), Some(u)) if *u > 0.0 => Some(o / u - 1.0),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(LiftMatrix { uc_recall, oc_recall, lift })
}

/// Conditions for `g` embeddings per step: offset-major over the action
/// order, so small `g` favours the nearest future.
pub fn mt_conditions(cfg: &ModelConfig, actions: &[ActionId], surface: SurfaceId, g: usize) -> Vec<ConditionSet> {
    let na = actions.len().max(1);
    (0..g)
        .map(|i| {
            let offset = (i / na) % cfg.num_offset_buckets();
            ConditionSet::new(actions.get(i % na).copied(), Some(surface), Some(offset))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub g: usize,
    pub steps: usize,
    pub recall: f64,
    pub prop_unique: f64,
    pub wall_clock: Duration,
}

/// Holds the total number of generated embeddings at `total` and varies the
/// number per step. With `ceil(total / g)` steps any surplus from the last
/// step is dropped before scoring.
pub fn mt_tradeoff_sweep(
    evaluator: &Evaluator<'_>,
    model: &Model,
    gs: &[usize],
    total: usize,
    budgets: &Budgets,
) -> Result<Vec<SweepRow>> {
    if gs.contains(&0) || total == 0 {
        return Err(Error::validation("g values and total must be positive"));
    }
    let mut actions: Vec<ActionId> = budgets.keys().copied().collect();
    actions.sort_by(|a, b| budgets[b].total_cmp(&budgets[a]).then(a.cmp(b)));
    let mut rows = Vec::with_capacity(gs.len());
    for &g in gs {
        let steps = steps_for(total, g);
        let request = |c: &EvalCase| GenerationRequest {
            request_id: c.user_id,
            surface: c.surface,
            mode: GenerationMode::MtOc,
            num_steps: steps,
            budgets: budgets.clone(),
            conditions: Some(mt_conditions(model.config(), &actions, c.surface, g)),
            ..GenerationRequest::default()
        };
        let wall_clock = evaluator.time_generation(model, request, 3)?;
        let s = summarize(&evaluator.run_limited(model, request, total)?)?;
        rows.push(SweepRow { g, steps, recall: s.recall, prop_unique: s.prop_unique, wall_clock });
    }
    Ok(rows)
}
