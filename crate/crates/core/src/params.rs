//! Named trainable tensors and their gradients.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of parameters. Tables registered with [`ParamStore::add_table`]
/// receive row-sparse gradients and lazy optimizer updates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    sparse: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn add_table(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    fn insert(&mut self, name: String, value: Tensor, sparse: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.sparse.push(sparse);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_table(&self, id: ParamId) -> bool {
        self.sparse[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Panics when `name` was never registered; model code only looks up
    /// names it created itself.
    pub fn expect(&self, name: &str) -> ParamId {
        self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` weight.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Clone, Debug)]
pub enum Grad {
    Dense(Tensor),
    /// Only the touched rows of an embedding table.
    Rows { cols: usize, rows: BTreeMap<usize, Vec<f64>> },
}

impl Grad {
    pub fn for_each_value(&self, mut f: impl FnMut(f64)) {
        match self {
            Grad::Dense(t) => t.data().iter().copied().for_each(&mut f),
            Grad::Rows { rows, .. } => rows.values().flatten().copied().for_each(&mut f),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            Grad::Dense(t) => t.scale_assign(s),
            Grad::Rows { rows, .. } => rows.values_mut().flatten().for_each(|v| *v *= s),
        }
    }

    /// Inner product with a dense direction of the parameter's full shape.
    pub fn dot_dense(&self, dir: &Tensor) -> f64 {
        match self {
            Grad::Dense(t) => t.dot(dir),
            Grad::Rows { rows, .. } => rows
                .iter()
                .map(|(&r, g)| g.iter().zip(dir.row(r)).map(|(a, b)| a * b).sum::<f64>())
                .sum(),
        }
    }
}

/// Gradients for every parameter reached by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Grad>>,
}

impl Gradients {
    pub(crate) fn new(num_params: usize) -> Self {
        Gradients { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Grad> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Grad)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub(crate) fn accumulate_dense(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(Grad::Dense(t)) => t.add_assign(g),
            Some(Grad::Rows { .. }) => unreachable!("dense gradient for a table parameter"),
            slot @ None => *slot = Some(Grad::Dense(g.clone())),
        }
    }

    pub(crate) fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], g: &Tensor) {
        let slot = self.grads[id.0].get_or_insert_with(|| Grad::Rows { cols: g.cols(), rows: BTreeMap::new() });
        match slot {
            Grad::Rows { rows: acc, cols } => {
                for (i, &r) in rows.iter().enumerate() {
                    let dst = acc.entry(r).or_insert_with(|| vec![0.0; *cols]);
                    for (d, s) in dst.iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
            Grad::Dense(t) => {
                for (i, &r) in rows.iter().enumerate() {
                    for (d, s) in t.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        for g in self.grads.iter().flatten() {
            g.for_each_value(|v| ok &= v.is_finite());
        }
        ok
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.grads.iter().flatten() {
            g.for_each_value(|v| s += v * v);
        }
        s.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        let mut zero = true;
        for g in self.grads.iter().flatten() {
            g.for_each_value(|v| zero &= v == 0.0);
        }
        zero
    }
}
