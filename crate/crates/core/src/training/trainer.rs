//! Training loop. A producer thread shuffles, windows and prepares batches
//! (including all sketch updates and sampling); the caller's thread runs
//! forward/backward passes and owns every parameter update.

use std::path::PathBuf;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{batch_loss_on_tape, prepare_batch, CountMinSketch, PreparedBatch, TrainingConfig};
use crate::error::{Error, Result};
use crate::events::{Catalog, InteractionEvent};
use crate::model::{save_checkpoint, Model, LAMBDA_PARAM};
use crate::optim::Adam;
use crate::tape::softplus_inverse;
use crate::tensor::Tensor;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Present on the last step of an epoch when a validator is supplied.
    pub val_recall_at_10: Option<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub metrics: Vec<MetricRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingReport {
    pub fn steps(&self) -> u64 {
        self.metrics.last().map_or(0, |m| m.step)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }
}

/// Optional side outputs of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory receiving `epoch_NNN.grck` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV metrics log (`step,epoch,loss,val_recall_at_10,lambda`).
    pub metrics_path: Option<PathBuf>,
    /// Held-out recall@10, evaluated at the end of each epoch.
    pub validate: Option<&'a (dyn Fn(&Model) -> Result<f64> + Sync)>,
}

/// Splits a history into training windows of at most `max_len` events,
/// aligned to the most recent event. Windows shorter than 2 are dropped.
pub fn split_windows(events: &[InteractionEvent], max_len: usize) -> Vec<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    let mut end = events.len();
    while end >= 2 {
        let start = end.saturating_sub(max_len);
        out.push(events[start..end].to_vec());
        end = start;
    }
    out.reverse();
    out
}

enum Msg {
    Batch(usize, Box<PreparedBatch>),
    EpochEnd(usize),
}

/// Trains `model` in place on per-user chronological histories.
pub fn train(
    model: &mut Model,
    catalog: &Catalog,
    histories: &[Vec<InteractionEvent>],
    cfg: &TrainingConfig,
    hooks: TrainHooks<'_>,
) -> Result<TrainingReport> {
    cfg.validate()?;
    let examples: Vec<Vec<InteractionEvent>> =
        histories.iter().flat_map(|h| split_windows(h, model.config().max_seq_len)).collect();
    if examples.is_empty() {
        return Err(Error::validation("no training sequences with at least two events"));
    }
    let pins: Vec<u64> = catalog.pins().map(|p| p.item_id).collect();
    let per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = per_epoch * cfg.epochs as u64;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    {
        let lambda = model.params().expect(LAMBDA_PARAM);
        *model.params_mut().get_mut(lambda) = Tensor::scalar(softplus_inverse(cfg.lambda_init));
    }
    let mut adam = Adam::new(cfg.adam.clone(), model.params(), total_steps);
    let mut writer = match &hooks.metrics_path {
        Some(p) => Some(csv::Writer::from_path(p).map_err(|e| Error::State(format!("metrics log: {e}")))?),
        None => None,
    };
    if let Some(dir) = &hooks.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let model_cfg = model.config().clone();
    let mut report = TrainingReport::default();

    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Msg>>(2);
        let examples = &examples;
        let pins = &pins;
        let model_cfg = &model_cfg;
        scope.spawn(move || {
            let mut sketch = CountMinSketch::new(cfg.cms_width, cfg.cms_depth, cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut sent = 0u64;
            for epoch in 0..cfg.epochs {
                let mut order: Vec<usize> = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    if sent == total_steps {
                        break;
                    }
                    let seqs = chunk.iter().map(|&i| examples[i].clone()).collect();
                    let msg = prepare_batch(seqs, catalog, pins, cfg, model_cfg, &mut sketch, &mut rng)
                        .map(|b| Msg::Batch(epoch, Box::new(b)));
                    let failed = msg.is_err();
                    if tx.send(msg).is_err() || failed {
                        return;
                    }
                    sent += 1;
                }
                if tx.send(Ok(Msg::EpochEnd(epoch))).is_err() || sent == total_steps {
                    return;
                }
            }
        });

        let mut step = 0u64;
        let mut last_loss = f64::NAN;
        for msg in rx {
            match msg? {
                Msg::Batch(epoch, batch) => {
                    let (loss, mut grads) = {
                        let mut tape = model.tape();
                        let l = batch_loss_on_tape(&mut tape, model, catalog, &batch, cfg.loss_mode, cfg.feedback_weight)?;
                        if l.num_groups == 0 {
                            continue;
                        }
                        let loss = tape.value(l.main).scalar_value();
                        (loss, tape.backward(l.total)?)
                    };
                    step += 1;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { step, reason: format!("loss is {loss}") });
                    }
                    if !grads.all_finite() {
                        return Err(Error::Diverged { step, reason: "non-finite gradient".into() });
                    }
                    adam.step(model.params_mut(), &mut grads);
                    last_loss = loss;
                    log::debug!("step {step} loss {loss:.4} lambda {:.3}", model.lambda());
                    report.metrics.push(MetricRow {
                        step,
                        epoch,
                        loss,
                        val_recall_at_10: None,
                        lambda: model.lambda(),
                    });
                }
                Msg::EpochEnd(epoch) => {
                    let val = hooks.validate.map(|f| f(model)).transpose()?;
                    log::info!("epoch {epoch} done at step {step}: loss {last_loss:.4} val recall@10 {val:?}");
                    if let Some(dir) = &hooks.checkpoint_dir {
                        let path = dir.join(format!("epoch_{epoch:03}.grck"));
                        save_checkpoint(&path, model, Some(&adam.state))?;
                        report.checkpoints.push(path);
                    }
                    if let Some(row) = report.metrics.last_mut() {
                        row.val_recall_at_10 = val;
                    }
                }
            }
        }
        Ok(())
    })?;

    if let Some(w) = writer.as_mut() {
        for row in &report.metrics {
            w.serialize(row).map_err(|e| Error::State(format!("metrics log: {e}")))?;
        }
        w.flush()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: i64) -> InteractionEvent {
        InteractionEvent { user_id: 0, item_id: 0, action: 0, surface: 0, ts, feed_id: 0 }
    }

    #[test]
    fn windows_align_to_the_latest_event() {
        let events: Vec<_> = (0..7).map(ev).collect();
        let w = split_windows(&events, 3);
        let starts: Vec<i64> = w.iter().map(|x| x[0].ts).collect();
        assert_eq!(starts, vec![1, 4]);
        assert!(split_windows(&events[..1], 3).is_empty());
    }
}
