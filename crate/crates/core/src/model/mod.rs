//! Causal transformer decoder with a conditioned output head.

mod checkpoint;
mod config;
mod head;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ConditionSlots, ModelConfig};
pub use head::{ConditionSet, OutputEmbedding};
pub use transformer::{HiddenStates, KvCache};
pub(crate) use head::head;
pub(crate) use transformer::transformer;

use crate::error::Result;
use crate::features::PHASE_PARAM;
use crate::params::{glorot, uniform, ParamStore};
use crate::tape::{softplus_inverse, Tape, Var};
use crate::tensor::Tensor;

pub const LAMBDA_PARAM: &str = "loss.lambda_raw";
pub const FEEDBACK_PARAM: &str = "gen.feedback.w";
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Configuration plus every learnable tensor: embedders, transformer,
/// output head, feedback adapter and the similarity scale.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Model { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Self {
        Model { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params)
    }

    /// Current similarity scale λ = softplus(raw).
    pub fn lambda(&self) -> f64 {
        crate::tape::softplus(self.params.get(self.params.expect(LAMBDA_PARAM)).scalar_value())
    }
}

fn add_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: &[usize], out: usize) {
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        store.add(format!("{prefix}.{i}.w"), glorot(rng, width, h));
        store.add(format!("{prefix}.{i}.b"), Tensor::zeros(1, h));
        store.add(format!("{prefix}.{i}.ln_g"), Tensor::filled(1, h, 1.0));
        store.add(format!("{prefix}.{i}.ln_b"), Tensor::zeros(1, h));
        width = h;
    }
    store.add(format!("{prefix}.out.w"), glorot(rng, width, out));
    store.add(format!("{prefix}.out.b"), Tensor::zeros(1, out));
}

fn add_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.add(format!("{prefix}.g"), Tensor::filled(1, dim, 1.0));
    store.add(format!("{prefix}.b"), Tensor::zeros(1, dim));
}

fn init_params(cfg: &ModelConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let f = &cfg.features;
    let d = cfg.model_dim;

    for h in 0..f.id_table.num_hashes {
        store.add_table(format!("emb.id.{h}"), uniform(&mut rng, f.id_table.num_rows, f.id_table.dims_per_hash, 0.1));
    }
    add_mlp(&mut store, &mut rng, "emb.pin", f.content_dim + f.id_table.id_dim(), &f.embedder_hidden, cfg.output_dim);
    add_mlp(&mut store, &mut rng, "emb.query", f.content_dim, &f.embedder_hidden, cfg.output_dim);
    store.add(PHASE_PARAM, Tensor::zeros(1, f.temporal.rel_num_freqs));

    store.add("input.proj.w", glorot(&mut rng, cfg.output_dim + f.temporal.dim(), d));
    store.add("input.proj.b", Tensor::zeros(1, d));
    store.add_table("input.surface", uniform(&mut rng, cfg.num_surfaces, d, 0.1));
    store.add_table("pos_emb", uniform(&mut rng, cfg.max_seq_len, d, 0.05));

    for l in 0..cfg.num_layers {
        add_layer_norm(&mut store, &format!("blk.{l}.ln1"), d);
        store.add(format!("blk.{l}.qkv.w"), glorot(&mut rng, d, 3 * d));
        store.add(format!("blk.{l}.qkv.b"), Tensor::zeros(1, 3 * d));
        store.add(format!("blk.{l}.out.w"), glorot(&mut rng, d, d));
        store.add(format!("blk.{l}.out.b"), Tensor::zeros(1, d));
        add_layer_norm(&mut store, &format!("blk.{l}.ln2"), d);
        store.add(format!("blk.{l}.ffn1.w"), glorot(&mut rng, d, cfg.ffn_dim));
        store.add(format!("blk.{l}.ffn1.b"), Tensor::zeros(1, cfg.ffn_dim));
        store.add(format!("blk.{l}.ffn2.w"), glorot(&mut rng, cfg.ffn_dim, d));
        store.add(format!("blk.{l}.ffn2.b"), Tensor::zeros(1, d));
    }
    add_layer_norm(&mut store, "final.ln", d);

    // The extra last row of each condition table is the learned null token.
    store.add_table("head.cond.action", uniform(&mut rng, cfg.num_actions + 1, cfg.cond_dim, 1.0));
    store.add_table("head.cond.surface", uniform(&mut rng, cfg.num_surfaces + 1, cfg.cond_dim, 1.0));
    store.add_table("head.cond.offset", uniform(&mut rng, cfg.num_offset_buckets() + 1, cfg.cond_dim, 1.0));
    add_mlp(&mut store, &mut rng, "head", d + 3 * cfg.cond_dim, &cfg.head_hidden_dims, cfg.output_dim);

    let mut eye = Tensor::zeros(cfg.output_dim, cfg.output_dim);
    for i in 0..cfg.output_dim {
        eye.row_mut(i)[i] = 1.0;
    }
    store.add(FEEDBACK_PARAM, eye);
    store.add(LAMBDA_PARAM, Tensor::scalar(softplus_inverse(DEFAULT_LAMBDA)));
    store
}

pub(crate) fn linear(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Var {
    let w = tape.param_by_name(&format!("{prefix}.w"));
    let b = tape.param_by_name(&format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

pub(crate) fn layer_norm(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Var {
    let g = tape.param_by_name(&format!("{prefix}.g"));
    let b = tape.param_by_name(&format!("{prefix}.b"));
    tape.layer_norm(x, g, b)
}

/// `(Linear → ReLU → LayerNorm)* → Linear → L2-normalise`
pub(crate) fn normalized_mlp(tape: &mut Tape<'_>, prefix: &str, num_hidden: usize, mut x: Var) -> Var {
    for i in 0..num_hidden {
        let p = format!("{prefix}.{i}");
        x = linear(tape, &p, x);
        x = tape.relu(x);
        let g = tape.param_by_name(&format!("{p}.ln_g"));
        let b = tape.param_by_name(&format!("{p}.ln_b"));
        x = tape.layer_norm(x, g, b);
    }
    let y = linear(tape, &format!("{prefix}.out"), x);
    tape.l2_normalize(y)
}
