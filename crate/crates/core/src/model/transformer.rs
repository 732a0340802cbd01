//! Pre-LN transformer stack with learned absolute positions and an optional
//! per-request key/value cache.

use super::{layer_norm, linear, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Final-layer hidden states, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates(pub Tensor);

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn position(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.len().checked_sub(1).map(|t| self.0.row(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Keys and values of every layer for the positions processed so far.
/// Owned by exactly one in-flight request.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    model_dim: usize,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            keys: (0..cfg.num_layers).map(|_| Tensor::zeros(0, cfg.model_dim)).collect(),
            values: (0..cfg.num_layers).map(|_| Tensor::zeros(0, cfg.model_dim)).collect(),
            model_dim: cfg.model_dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *t = Tensor::zeros(0, self.model_dim);
        }
        self.len = 0;
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.keys.len() != cfg.num_layers || self.model_dim != cfg.model_dim {
            return Err(Error::validation("kv cache was built for a different model configuration"));
        }
        Ok(())
    }
}

fn check_inputs(cfg: &ModelConfig, inputs: &Tensor, cached: usize) -> Result<()> {
    if inputs.rows() == 0 {
        return Err(Error::validation("empty input sequence"));
    }
    if inputs.cols() != cfg.model_dim {
        return Err(Error::validation(format!(
            "input width {} does not match model_dim {}",
            inputs.cols(),
            cfg.model_dim
        )));
    }
    let len = cached + inputs.rows();
    if len > cfg.max_seq_len {
        return Err(Error::Length { len, max: cfg.max_seq_len });
    }
    if !inputs.all_finite() {
        return Err(Error::validation("non-finite input"));
    }
    Ok(())
}

/// Runs the stack over `inputs` (rows are positions). With a cache, the rows
/// are the positions following the cached prefix and the cache is extended.
pub(crate) fn transformer(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    inputs: Var,
    mut cache: Option<&mut KvCache>,
) -> Result<Var> {
    let cached = match cache.as_deref() {
        Some(c) => {
            c.check(cfg)?;
            c.len
        }
        None => 0,
    };
    check_inputs(cfg, tape.value(inputs), cached)?;
    let n = tape.value(inputs).rows();
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let positions: Vec<usize> = (cached..cached + n).collect();
    let pos = tape.gather(tape.store().expect("pos_emb"), &positions);
    let mut x = tape.add(inputs, pos);
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    for l in 0..cfg.num_layers {
        let h = layer_norm(tape, &format!("blk.{l}.ln1"), x);
        let qkv = linear(tape, &format!("blk.{l}.qkv"), h);
        let q = tape.slice_cols(qkv, 0, d);
        let mut k = tape.slice_cols(qkv, d, d);
        let mut v = tape.slice_cols(qkv, 2 * d, d);
        if let Some(c) = cache.as_deref_mut() {
            let new_k = tape.value(k).clone();
            let new_v = tape.value(v).clone();
            if c.keys[l].rows() > 0 {
                let past_k = tape.constant(c.keys[l].clone());
                let past_v = tape.constant(c.values[l].clone());
                k = tape.concat_rows(&[past_k, k]);
                v = tape.concat_rows(&[past_v, v]);
            }
            c.keys[l].push_rows(&new_k);
            c.values[l].push_rows(&new_v);
        }
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * hd, hd);
            let kh = tape.slice_cols(k, head * hd, hd);
            let vh = tape.slice_cols(v, head * hd, hd);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.causal_softmax(scores);
            heads.push(tape.matmul(probs, vh));
        }
        let attn = tape.concat_cols(&heads);
        let attn = linear(tape, &format!("blk.{l}.out"), attn);
        x = tape.add(x, attn);

        let h = layer_norm(tape, &format!("blk.{l}.ln2"), x);
        let f = linear(tape, &format!("blk.{l}.ffn1"), h);
        let f = tape.gelu(f);
        let f = linear(tape, &format!("blk.{l}.ffn2"), f);
        x = tape.add(x, f);
    }
    if let Some(c) = cache {
        c.len += n;
    }
    Ok(layer_norm(tape, "final.ln", x))
}

impl Model {
    /// Hidden states for a full sequence; row `t` depends only on rows `0..=t`.
    pub fn forward(&self, inputs: &Tensor) -> Result<HiddenStates> {
        let mut cache = KvCache::new(self.config());
        self.forward_incremental(&mut cache, inputs)
    }

    /// Hidden states for `new_inputs`, which continue the cached prefix.
    pub fn forward_incremental(&self, cache: &mut KvCache, new_inputs: &Tensor) -> Result<HiddenStates> {
        let mut tape = self.tape();
        let x = tape.constant(new_inputs.clone());
        let h = transformer(&mut tape, self.config(), x, Some(cache))?;
        Ok(HiddenStates(tape.value(h).clone()))
    }
}
