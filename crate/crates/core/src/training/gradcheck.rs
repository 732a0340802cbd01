//! Directional finite-difference check of the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss_on_tape, LossMode, PreparedBatch};
use crate::error::Result;
use crate::events::Catalog;
use crate::model::{Model, FEEDBACK_PARAM};
use crate::params::Gradients;
use crate::tensor::Tensor;

/// Analytic vs. central-difference directional derivative for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Objective value (main loss plus feedback term) and its gradients.
pub fn loss_and_gradients(
    model: &Model,
    catalog: &Catalog,
    batch: &PreparedBatch,
    mode: LossMode,
    aux_weight: f64,
) -> Result<(f64, Gradients)> {
    let mut tape = model.tape();
    let l = batch_loss_on_tape(&mut tape, model, catalog, batch, mode, aux_weight)?;
    let value = tape.value(l.total).scalar_value();
    Ok((value, tape.backward(l.total)?))
}

fn loss_value(model: &Model, catalog: &Catalog, batch: &PreparedBatch, mode: LossMode, aux: f64) -> Result<f64> {
    let mut tape = model.tape();
    let l = batch_loss_on_tape(&mut tape, model, catalog, batch, mode, aux)?;
    Ok(tape.value(l.total).scalar_value())
}

/// Checks every parameter tensor along a random unit direction with step
/// `eps`. Relative error is `|a - n| / max(|a|, |n|)`, or 0 when both are
/// below 1e-12.
///
/// The feedback term reads stop-gradient copies of predictions and targets,
/// so finite differences through it would see dependencies the gradient
/// deliberately ignores. The feedback adapter is therefore checked against
/// the full objective and every other tensor against the main loss.
pub fn check_gradients(
    model: &Model,
    catalog: &Catalog,
    batch: &PreparedBatch,
    mode: LossMode,
    aux_weight: f64,
    eps: f64,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let (_, main_grads) = loss_and_gradients(model, catalog, batch, mode, 0.0)?;
    let (_, full_grads) = loss_and_gradients(model, catalog, batch, mode, aux_weight)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in model.params().ids() {
        let shape = model.params().get(id).shape();
        let mut dir = Tensor::from_vec(shape.0, shape.1, (0..shape.0 * shape.1).map(|_| rng.random_range(-1.0..1.0)).collect());
        let norm = dir.dot(&dir).sqrt();
        dir.scale_assign(1.0 / norm);
        let (grads, aux) =
            if model.params().name(id) == FEEDBACK_PARAM { (&full_grads, aux_weight) } else { (&main_grads, 0.0) };
        let analytic = grads.get(id).map_or(0.0, |g| g.dot_dense(&dir));
        let shifted = |sign: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut step = dir.clone();
            step.scale_assign(sign * eps);
            m.params_mut().get_mut(id).add_assign(&step);
            loss_value(&m, catalog, batch, mode, aux)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        let rel_error = if scale < 1e-12 { 0.0 } else { (analytic - numeric).abs() / scale };
        out.push(GroupCheck { name: model.params().name(id).to_string(), analytic, numeric, rel_error });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{InteractionEvent, ItemFeature, ItemType};
    use crate::model::ModelConfig;
    use crate::training::{prepare_batch, CountMinSketch, TrainingConfig};

    pub(crate) fn fixture() -> (Model, Catalog, PreparedBatch) {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let catalog = Catalog::new(
            (0..40u64)
                .map(|i| ItemFeature {
                    item_id: i,
                    item_type: if i % 7 == 6 { ItemType::Query } else { ItemType::Pin },
                    content: (0..6).map(|k| ((i * 11 + k) as f32 * 0.29).cos()).collect(),
                })
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs: Vec<Vec<InteractionEvent>> = (0..4u64)
            .map(|u| {
                let mut ts = 5_000;
                (0..7)
                    .map(|j| {
                        ts += rng.random_range(5..4000);
                        InteractionEvent {
                            user_id: u,
                            item_id: rng.random_range(0..40),
                            action: rng.random_range(0..3),
                            surface: rng.random_range(0..3),
                            ts,
                            feed_id: j / 3,
                        }
                    })
                    .collect()
            })
            .collect();
        let pins: Vec<u64> = catalog.pins().map(|p| p.item_id).collect();
        let tcfg = TrainingConfig { num_random_negatives: 12, multi_token_k: 2, multi_token_window: 4, ..TrainingConfig::default() };
        let mut sketch = CountMinSketch::new(64, 3, 0);
        let batch = prepare_batch(seqs, &catalog, &pins, &tcfg, model.config(), &mut sketch, &mut rng).unwrap();
        (model, catalog, batch)
    }

    #[test]
    fn every_parameter_group_matches_finite_differences() {
        let (model, catalog, batch) = fixture();
        let checks = check_gradients(&model, &catalog, &batch, LossMode::NextToken, 1.0, 1e-5, 3).unwrap();
        assert_eq!(checks.len(), model.params().len());
        for c in &checks {
            assert!(c.analytic != 0.0, "{} receives no gradient", c.name);
            assert!(c.rel_error < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (model, catalog, batch) = fixture();
        let mut tape = model.tape();
        let l = batch_loss_on_tape(&mut tape, &model, &catalog, &batch, LossMode::NextToken, 1.0).unwrap();
        let grads = tape.backward_with(l.total, Tensor::scalar(0.0)).unwrap();
        assert!(grads.is_all_zero());
    }
}
