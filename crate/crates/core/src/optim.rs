//! Adam with cosine learning-rate decay. Embedding tables get lazy updates:
//! only rows that received gradient move.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::{Grad, Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Final learning rate as a fraction of `lr` at the end of the schedule.
    pub min_lr_ratio: f64,
    pub warmup_steps: u64,
    /// Global-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, min_lr_ratio: 0.1, warmup_steps: 20, clip_norm: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| {
            let t = params.get(id);
            Tensor::zeros(t.rows(), t.cols())
        }).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    total_steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore, total_steps: u64) -> Self {
        Adam { config, state: AdamState::new(params), total_steps: total_steps.max(1) }
    }

    pub fn with_state(config: AdamConfig, state: AdamState, total_steps: u64) -> Self {
        Adam { config, state, total_steps: total_steps.max(1) }
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        let c = &self.config;
        if step < c.warmup_steps {
            return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let t = ((step - c.warmup_steps) as f64 / (self.total_steps.saturating_sub(c.warmup_steps)).max(1) as f64).min(1.0);
        c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * 0.5 * (1.0 + (PI * t).cos()))
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut Gradients) -> f64 {
        let norm = grads.global_norm();
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            grads.scale(self.config.clip_norm / norm);
        }
        let lr = self.learning_rate(self.state.step);
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.state.m[id.index()], &mut self.state.v[id.index()]);
            let w = params.get_mut(id);
            match g {
                Grad::Dense(g) => {
                    for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                        update(w, m, v, g);
                    }
                }
                Grad::Rows { rows, .. } => {
                    for (&r, g) in rows {
                        let mr = m.row_mut(r);
                        let vr = v.row_mut(r);
                        for (((w, m), v), &g) in w.row_mut(r).iter_mut().zip(mr).zip(vr).zip(g) {
                            update(w, m, v, g);
                        }
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(vec![3.0, -2.0]));
        let cfg = AdamConfig { lr: 0.1, warmup_steps: 0, clip_norm: 0.0, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &store, 500);
        for _ in 0..500 {
            let mut grads = {
                let mut tape = Tape::new(&store);
                let x = tape.param(id);
                let l = tape.sum_squares(x);
                tape.backward(l).unwrap()
            };
            opt.step(&mut store, &mut grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let store = ParamStore::new();
        let opt = Adam::new(AdamConfig::default(), &store, 120);
        assert!(opt.learning_rate(0) < opt.learning_rate(19));
        assert!((opt.learning_rate(20) - 1e-3).abs() < 1e-12);
        assert!((opt.learning_rate(120) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn table_rows_without_gradient_stay_put() {
        let mut store = ParamStore::new();
        let id = store.add_table("t", Tensor::filled(4, 2, 1.0));
        let mut opt = Adam::new(AdamConfig::default(), &store, 10);
        let mut grads = {
            let mut tape = Tape::new(&store);
            let rows = tape.gather(id, &[2]);
            let l = tape.sum(rows);
            tape.backward(l).unwrap()
        };
        opt.step(&mut store, &mut grads);
        let t = store.get(id);
        assert_eq!(t.row(0), &[1.0, 1.0]);
        assert!(t.row(2)[0] < 1.0);
    }
}
