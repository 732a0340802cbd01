//! Item embedders. Pins combine their content vector with hashed id
//! embeddings; queries use content only. Both map into the shared
//! `output_dim` space that the output head also targets.

use super::hash_id;
use crate::error::{Error, Result};
use crate::events::{ItemFeature, ItemType};
use crate::model::{normalized_mlp, Model, ModelConfig, FEEDBACK_PARAM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn content_matrix(items: &[&ItemFeature], dim: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(items.len(), dim);
    for (r, item) in items.iter().enumerate() {
        if item.content.len() != dim {
            return Err(Error::validation(format!(
                "item {} has content dim {}, expected {dim}",
                item.item_id,
                item.content.len()
            )));
        }
        for (dst, &src) in t.row_mut(r).iter_mut().zip(&item.content) {
            if !src.is_finite() {
                return Err(Error::validation(format!("item {} has non-finite content", item.item_id)));
            }
            *dst = src as f64;
        }
    }
    Ok(t)
}

fn embed_group(tape: &mut Tape<'_>, cfg: &ModelConfig, items: &[&ItemFeature], kind: ItemType) -> Result<Var> {
    let f = &cfg.features;
    let content = tape.constant(content_matrix(items, f.content_dim)?);
    let hidden = f.embedder_hidden.len();
    match kind {
        ItemType::Query => Ok(normalized_mlp(tape, "emb.query", hidden, content)),
        ItemType::Pin => {
            let rows: Vec<Vec<usize>> = items.iter().map(|i| hash_id(i.item_id, &f.id_table)).collect();
            let mut parts = vec![content];
            for h in 0..f.id_table.num_hashes {
                let idx: Vec<usize> = rows.iter().map(|r| r[h]).collect();
                let table = tape.store().expect(&format!("emb.id.{h}"));
                parts.push(tape.gather(table, &idx));
            }
            let x = tape.concat_cols(&parts);
            Ok(normalized_mlp(tape, "emb.pin", hidden, x))
        }
    }
}

/// Unit-norm embeddings, one row per item in input order.
pub fn embed_items(tape: &mut Tape<'_>, cfg: &ModelConfig, items: &[&ItemFeature]) -> Result<Var> {
    if items.is_empty() {
        return Ok(tape.constant(Tensor::zeros(0, cfg.output_dim)));
    }
    let (pins, queries): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| items[i].item_type == ItemType::Pin);
    let mut blocks = Vec::new();
    let mut order = Vec::with_capacity(items.len());
    for (group, kind) in [(&pins, ItemType::Pin), (&queries, ItemType::Query)] {
        if group.is_empty() {
            continue;
        }
        let members: Vec<&ItemFeature> = group.iter().map(|&i| items[i]).collect();
        blocks.push(embed_group(tape, cfg, &members, kind)?);
        order.extend_from_slice(group);
    }
    let stacked = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks) };
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    Ok(tape.select_rows(stacked, &inverse))
}

pub fn embed_item(tape: &mut Tape<'_>, cfg: &ModelConfig, item: &ItemFeature) -> Result<Var> {
    embed_items(tape, cfg, &[item])
}

/// Embeddings of many items outside any training tape, in chunks.
pub fn embed_catalog(model: &Model, items: &[&ItemFeature]) -> Result<Tensor> {
    const CHUNK: usize = 1024;
    let mut out = Tensor::zeros(0, model.config().output_dim);
    for chunk in items.chunks(CHUNK) {
        let mut tape = model.tape();
        let v = embed_items(&mut tape, model.config(), chunk)?;
        out.push_rows(tape.value(v));
    }
    Ok(out)
}

/// Feedback adapter: maps a generated output embedding into the item
/// embedding space before it is fed back as the next input.
pub fn project_feedback(tape: &mut Tape<'_>, outputs: Var) -> Var {
    let w = tape.param_by_name(FEEDBACK_PARAM);
    let y = tape.matmul(outputs, w);
    tape.l2_normalize(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;

    fn item(id: u64, kind: ItemType, seed: f32) -> ItemFeature {
        ItemFeature { item_id: id, item_type: kind, content: (0..6).map(|i| (i as f32 * seed).sin()).collect() }
    }

    #[test]
    fn mixed_batch_matches_individual_embeddings() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let items = [item(1, ItemType::Query, 0.3), item(2, ItemType::Pin, 0.5), item(3, ItemType::Query, 0.9)];
        let refs: Vec<&ItemFeature> = items.iter().collect();
        let mut tape = m.tape();
        let all = embed_items(&mut tape, m.config(), &refs).unwrap();
        let all = tape.value(all).clone();
        for (r, it) in items.iter().enumerate() {
            let mut t = m.tape();
            let one = embed_item(&mut t, m.config(), it).unwrap();
            for (a, b) in t.value(one).data().iter().zip(all.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((l2_norm(all.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pins_with_equal_content_differ_by_id() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let (a, b) = (item(10, ItemType::Pin, 0.4), item(11, ItemType::Pin, 0.4));
        let mut tape = m.tape();
        let e = embed_items(&mut tape, m.config(), &[&a, &b]).unwrap();
        let e = tape.value(e);
        assert_ne!(e.row(0), e.row(1));
    }

    #[test]
    fn wrong_content_dim_is_rejected() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let bad = ItemFeature { item_id: 1, item_type: ItemType::Pin, content: vec![0.0; 3] };
        assert!(matches!(embed_item(&mut m.tape(), m.config(), &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn feedback_adapter_starts_as_identity() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let mut tape = m.tape();
        let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let x = tape.constant(Tensor::row_vector(v.clone()));
        let y = project_feedback(&mut tape, x);
        let n = l2_norm(&v);
        for (a, b) in tape.value(y).data().iter().zip(&v) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }
}
