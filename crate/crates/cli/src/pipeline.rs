//! The stages behind each subcommand, callable without a process boundary.
//!
//! A data directory holds:
//!
//! ```text
//! items.grif     item features
//! events.jsonl   every interaction, chronological per user
//! world.toml     generator settings (synthetic data only)
//! signals/       batch segment + realtime log served by `serve`
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use genret_core::eval::{
    conditioned_lift_matrix, evaluate_by_surface, mt_tradeoff_sweep, EvalCase, EvalRow, EvalSpec, Evaluator, LiftMatrix, SweepRow,
};
use genret_core::events::{Catalog, InteractionEvent, ItemFeature};
use genret_core::features::embed_catalog;
use genret_core::features::io::{load_events, load_item_features, save_events, save_item_features};
use genret_core::generation::{Budgets, GenerationMode, GenerationRequest};
use genret_core::index::{load_index, save_index, IndexMode, ItemIndex, Neighbor};
use genret_core::model::{load_checkpoint, save_checkpoint, ConditionSlots, Model, ModelConfig};
use genret_core::serving::Engine;
use genret_core::signals::{EventLimits, SignalStore};
use genret_core::synth::{generate_world, group_by_user};
use genret_core::training::{train, TrainHooks, TrainingReport};

use crate::config::{Config, IndexConfig};

pub const ITEMS_FILE: &str = "items.grif";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const WORLD_FILE: &str = "world.toml";
pub const SIGNALS_DIR: &str = "signals";

/// Held-out users scored after every training epoch.
const VALIDATION_USERS: usize = 100;

pub struct Dataset {
    pub catalog: Catalog,
    pub events: Vec<InteractionEvent>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let items = load_item_features(dir.join(ITEMS_FILE)).with_context(|| format!("reading {}", dir.join(ITEMS_FILE).display()))?;
        let events = load_events(dir.join(EVENTS_FILE)).with_context(|| format!("reading {}", dir.join(EVENTS_FILE).display()))?;
        Ok(Dataset { catalog: Catalog::new(items)?, events })
    }

    /// (training, held-out) user histories under `spec`'s split.
    pub fn split(&self, spec: &EvalSpec) -> (Vec<Vec<InteractionEvent>>, Vec<Vec<InteractionEvent>>) {
        spec.partition_users(group_by_user(&self.events))
    }

    /// Share of each action among the given histories.
    pub fn action_budgets(histories: &[Vec<InteractionEvent>]) -> Budgets {
        let mut counts = Budgets::new();
        let mut total = 0.0;
        for e in histories.iter().flatten() {
            *counts.entry(e.action).or_default() += 1.0;
            total += 1.0;
        }
        counts.values_mut().for_each(|c| *c /= total);
        counts
    }
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub items: usize,
    pub users: usize,
    pub events: usize,
    pub cutoff: i64,
}

/// Generates the synthetic world into `out`.
pub fn synth(cfg: &Config, out: &Path) -> Result<SynthSummary> {
    let world = generate_world(&cfg.world)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_item_features(out.join(ITEMS_FILE), &world.items)?;
    save_events(out.join(EVENTS_FILE), &world.events)?;
    std::fs::write(out.join(WORLD_FILE), toml::to_string(&cfg.world)?)?;

    let mut ts: Vec<i64> = world.events.iter().map(|e| e.ts).collect();
    ts.sort_unstable();
    ensure!(!ts.is_empty(), "the configured world has no events");
    let at = ((cfg.synth.batch_quantile * ts.len() as f64).ceil() as usize).clamp(1, ts.len());
    let cutoff = ts[at - 1];
    let limits = EventLimits { num_actions: cfg.world.num_actions(), num_surfaces: cfg.world.surface_priors.len() };
    let signals = out.join(SIGNALS_DIR);
    if signals.exists() {
        std::fs::remove_dir_all(&signals)?;
    }
    SignalStore::create(&signals, &world.events, cutoff, limits)?;
    Ok(SynthSummary { items: world.items.len(), users: cfg.world.num_users, events: world.events.len(), cutoff })
}

/// Model config for `data`: action and surface vocabularies must cover
/// every id seen in the events.
pub fn model_config_for(cfg: &ModelConfig, events: &[InteractionEvent]) -> Result<ModelConfig> {
    let max_action = events.iter().map(|e| e.action).max().unwrap_or(0);
    let max_surface = events.iter().map(|e| e.surface).max().unwrap_or(0);
    if max_action >= cfg.num_actions {
        bail!("invalid config [model]: num_actions = {} but the data uses action {max_action}", cfg.num_actions);
    }
    if max_surface >= cfg.num_surfaces {
        bail!("invalid config [model]: num_surfaces = {} but the data uses surface {max_surface}", cfg.num_surfaces);
    }
    Ok(cfg.clone())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Request used to score a model on one held-out case.
pub fn eval_request(mode: GenerationMode, spec: &EvalSpec, budgets: &Budgets, model: &ModelConfig, case: &EvalCase) -> GenerationRequest {
    let mut req = GenerationRequest {
        request_id: case.user_id,
        surface: case.surface,
        mode,
        num_steps: spec.num_steps,
        ..GenerationRequest::default()
    };
    if mode != GenerationMode::Uc {
        req.budgets = budgets.clone();
    }
    if mode == GenerationMode::MtOc {
        req.offset_buckets = (0..model.num_offset_buckets()).collect();
    }
    req
}

/// Trains a fresh model on the non-held-out users and saves it to `out`.
pub fn train_model(cfg: &Config, data: &Dataset, out: &Path, outputs: &TrainOutputs) -> Result<(Model, TrainingReport)> {
    let model_cfg = model_config_for(&cfg.model, &data.events)?;
    let mut model = Model::new(model_cfg)?;
    let (train_h, eval_h) = data.split(&cfg.eval);
    ensure!(!train_h.is_empty(), "no training users after the held-out split");
    let spec = EvalSpec { max_users: VALIDATION_USERS, ..cfg.eval.clone() };
    let evaluator = Evaluator::new(&data.catalog, &eval_h, spec).ok();
    if evaluator.is_none() {
        log::warn!("no held-out users with targets; skipping validation");
    }
    let validate = |m: &Model| -> genret_core::Result<f64> {
        let ev = evaluator.as_ref().expect("validator only installed with an evaluator");
        let outcomes = ev.run(m, |c| eval_request(GenerationMode::Uc, ev.spec(), &Budgets::new(), m.config(), c))?;
        Ok(genret_core::eval::summarize(&outcomes)?.recall)
    };
    let hooks = TrainHooks {
        checkpoint_dir: outputs.checkpoint_dir.clone(),
        metrics_path: outputs.metrics.clone(),
        validate: evaluator.as_ref().map(|_| &validate as &(dyn Fn(&Model) -> genret_core::Result<f64> + Sync)),
    };
    let report = train(&mut model, &data.catalog, &train_h, &cfg.training, hooks)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &model, None).with_context(|| format!("writing {}", out.display()))?;
    Ok((model, report))
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path).with_context(|| format!("reading model {}", path.display()))?.model)
}

/// Index over every pin in the catalog, embedded by `model`.
pub fn build_index(cfg: &IndexConfig, model: &Model, catalog: &Catalog) -> Result<ItemIndex> {
    let pins: Vec<&ItemFeature> = catalog.pins().collect();
    ensure!(!pins.is_empty(), "the catalog has no pins to index");
    let ids = pins.iter().map(|p| p.item_id).collect();
    let vectors = embed_catalog(model, &pins)?;
    Ok(match cfg.kind {
        IndexMode::Exact => ItemIndex::build(ids, vectors)?,
        IndexMode::Ivf => {
            let partitions = if cfg.partitions > 0 { cfg.partitions } else { (pins.len() as f64).sqrt().round().max(1.0) as usize };
            let nprobe = if cfg.nprobe > 0 { cfg.nprobe } else { (partitions / 4).max(1) };
            ItemIndex::build_ivf(ids, vectors, partitions, cfg.kmeans_iters, nprobe, cfg.seed)?
        }
    })
}

pub fn write_index(index: &ItemIndex, out: &Path) -> Result<()> {
    save_index(out, index).with_context(|| format!("writing {}", out.display()))
}

/// Nearest indexed items to `item_id`'s own embedding.
pub fn query_index(model: &Model, index: &ItemIndex, catalog: &Catalog, item_id: u64, k: usize) -> Result<Vec<Neighbor>> {
    let item = catalog.require(item_id)?;
    let q = embed_catalog(model, &[item])?;
    Ok(index.knn(q.row(0), k, 1)?)
}

pub fn parse_mode(s: &str) -> Result<GenerationMode> {
    Ok(match s {
        "uc" => GenerationMode::Uc,
        "oc" => GenerationMode::Oc,
        "mt" => GenerationMode::MtOc,
        other => bail!("unknown mode {other:?}; expected uc, oc or mt"),
    })
}

pub fn mode_label(mode: GenerationMode) -> &'static str {
    match mode {
        GenerationMode::Uc => "uc",
        GenerationMode::Oc => "oc",
        GenerationMode::MtOc => "mt",
    }
}

pub struct EvalOutputs {
    pub rows: Vec<EvalRow>,
    pub lift: Option<LiftMatrix>,
    pub sweep: Option<Vec<SweepRow>>,
    pub random_baseline: f64,
}

pub struct EvalPlan<'a> {
    pub mode: GenerationMode,
    /// Unconditioned reference model for the lift matrix.
    pub uc_model: Option<&'a Model>,
    /// `(g values, total embeddings)` for the multi-token sweep.
    pub sweep: Option<(Vec<usize>, usize)>,
}

/// Scores `model` on the held-out users. Budgets for conditioned modes are
/// the training users' action mix.
pub fn evaluate(spec: &EvalSpec, model: &Model, data: &Dataset, plan: &EvalPlan<'_>) -> Result<EvalOutputs> {
    let (train_h, eval_h) = data.split(spec);
    let budgets = Dataset::action_budgets(&train_h);
    let evaluator = Evaluator::new(&data.catalog, &eval_h, spec.clone())?;
    let mcfg = model.config().clone();
    if plan.mode != GenerationMode::Uc && !mcfg.conditioning.action {
        log::warn!("model was trained without action conditioning; {} requests read as unconditioned", mode_label(plan.mode));
    }
    let rows = evaluate_by_surface(&evaluator, model, mode_label(plan.mode), |c| eval_request(plan.mode, spec, &budgets, &mcfg, c))?;
    let lift = plan.uc_model.map(|uc| conditioned_lift_matrix(&evaluator, model, uc)).transpose()?;
    let sweep = match &plan.sweep {
        Some((gs, total)) => Some(mt_tradeoff_sweep(&evaluator, model, gs, *total, &budgets)?),
        None => None,
    };
    Ok(EvalOutputs { rows, lift, sweep, random_baseline: evaluator.random_baseline() })
}

/// Serving snapshot from files on disk.
pub fn build_engine(cfg: &Config, model: &Path, index: &Path, data_dir: &Path) -> Result<Engine> {
    let model = load_model(model)?;
    let index = load_index(index).with_context(|| format!("reading index {}", index.display()))?;
    ensure!(
        index.dim() == model.config().output_dim,
        "index dimension {} does not match the model's output_dim {}",
        index.dim(),
        model.config().output_dim
    );
    let items = load_item_features(data_dir.join(ITEMS_FILE)).with_context(|| format!("reading {}", data_dir.join(ITEMS_FILE).display()))?;
    let limits = EventLimits { num_actions: model.config().num_actions, num_surfaces: model.config().num_surfaces };
    let signals = SignalStore::open(data_dir.join(SIGNALS_DIR), limits).context("opening the signal store")?;
    Ok(Engine { model, catalog: Catalog::new(items)?, index, signals, config: cfg.engine.clone() })
}

pub fn parse_conditioning(s: &str) -> Result<ConditionSlots> {
    Ok(match s {
        "none" => ConditionSlots::NONE,
        "outcome" => ConditionSlots::OUTCOME,
        "outcome-temporal" => ConditionSlots::OUTCOME_TEMPORAL,
        other => bail!("unknown conditioning {other:?}; expected none, outcome or outcome-temporal"),
    })
}
