//! Trains UC, OC and MT models on a synthetic world and prints the offline
//! metrics. `cargo run --release -p genret-core --example toy_experiment`

use std::time::Instant;

use genret_core::eval::{conditioned_lift_matrix, mt_tradeoff_sweep, summarize, EvalSpec, Evaluator};
use genret_core::events::Catalog;
use genret_core::generation::{Budgets, GenerationRequest};
use genret_core::model::{ConditionSlots, Model, ModelConfig};
use genret_core::synth::{generate_world, WorldConfig};
use genret_core::training::{train, LossMode, TrainHooks, TrainingConfig};

fn main() -> genret_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(2, |s| s.parse().unwrap());
    let world_cfg = WorldConfig::default();
    let world = generate_world(&world_cfg)?;
    println!("events {}", world.events.len());
    let catalog = Catalog::new(world.items.clone())?;
    let spec = EvalSpec { num_negatives: 100_000, eval_percent: 10, max_users: 200, ..EvalSpec::default() };
    let (train_h, eval_h) = spec.partition_users(world.histories());
    let evaluator = Evaluator::new(&catalog, &eval_h, spec.clone())?;
    println!("train users {} eval cases {} negatives {}", train_h.len(), evaluator.cases().len(), evaluator.num_negatives());

    let mut models = Vec::new();
    for slots in [ConditionSlots::NONE, ConditionSlots::OUTCOME, ConditionSlots::OUTCOME_TEMPORAL] {
        let mut mcfg = ModelConfig { conditioning: slots, ..ModelConfig::default() };
        mcfg.num_actions = world_cfg.num_actions();
        let mut model = Model::new(mcfg)?;
        let tcfg = TrainingConfig {
            epochs,
            multi_token_k: if slots.offset { 4 } else { 1 },
            multi_token_window: if slots.offset { 16 } else { 1 },
            loss_mode: LossMode::NextToken,
            ..TrainingConfig::default()
        };
        let t = Instant::now();
        let report = train(&mut model, &catalog, &train_h, &tcfg, TrainHooks::default())?;
        let l = report.losses();
        let first: f64 = l.iter().take(10).sum::<f64>() / 10.0;
        let last: f64 = l.iter().rev().take(10).sum::<f64>() / 10.0;
        println!("{slots:?}: {} steps in {:.1}s, loss {first:.3} -> {last:.3}", report.steps(), t.elapsed().as_secs_f64());
        let t = Instant::now();
        let uc = summarize(&evaluator.run(&model, |c| GenerationRequest { request_id: c.user_id, surface: c.surface, ..Default::default() })?)?;
        println!("  uc-style recall {:.4} (baseline {:.4}) prop_unique {:.3} eval {:.1}s", uc.recall, evaluator.random_baseline(), uc.prop_unique, t.elapsed().as_secs_f64());
        models.push(model);
    }
    let t = Instant::now();
    let lift = conditioned_lift_matrix(&evaluator, &models[1], &models[0])?;
    println!("lift (eval {:.1}s): uc {:?}", t.elapsed().as_secs_f64(), lift.uc_recall);
    for row in &lift.lift {
        println!("  {:?}", row.iter().map(|x| x.map(|v| (v * 1000.0).round() / 10.0)).collect::<Vec<_>>());
    }
    println!("diag mean {:?} dominant {}", lift.diagonal_mean(), lift.diagonal_dominant());
    let budgets: Budgets = world_cfg.action_priors.iter().copied().enumerate().collect();
    let t = Instant::now();
    for r in mt_tradeoff_sweep(&evaluator, &models[2], &[1, 2, 4, 8, 16], 16, &budgets)? {
        println!("g {:2} steps {:2} recall {:.4} prop {:.3} wall {:.1}ms", r.g, r.steps, r.recall, r.prop_unique, r.wall_clock.as_secs_f64() * 1e3);
    }
    println!("sweep {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
