//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Values are computed
//! eagerly, so the same tape doubles as the inference evaluator; calling
//! [`Tape::backward`] walks the record in reverse and returns parameter
//! gradients. Parameters are read from a borrowed [`ParamStore`]; embedding
//! tables are only ever gathered row-wise and produce row-sparse gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Candidate layout for [`Tape::sampled_softmax`].
///
/// Row `r` of the prediction matrix is scored against its target column
/// `targets[r]` plus every candidate whose id differs from the target's id.
#[derive(Clone, Debug)]
pub struct SampledSoftmaxSpec {
    pub cand_ids: Vec<u64>,
    /// Log sampling probability subtracted from each candidate's logit.
    pub log_q: Vec<f64>,
    pub targets: Vec<usize>,
}

impl SampledSoftmaxSpec {
    fn included(&self, r: usize, c: usize) -> bool {
        let t = self.targets[r];
        c == t || self.cand_ids[c] != self.cand_ids[t]
    }
}

#[derive(Debug)]
struct SampledSoftmaxCache {
    preds: Var,
    cands: Var,
    scale: Var,
    spec: SampledSoftmaxSpec,
    probs: Tensor,
    dots: Tensor,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    SelectRows { src: Var, rows: Vec<usize> },
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Standardize { src: Var, inv_std: Vec<f64> },
    L2Normalize { src: Var, norms: Vec<f64> },
    CausalSoftmax { src: Var },
    SampledSoftmax(Box<SampledSoftmaxCache>),
    GroupMin { src: Var, argmin: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// The whole parameter tensor as a node; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Var {
        let id = self.store.expect(name);
        self.param(id)
    }

    /// Rows `rows` of a parameter, without materialising the whole table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let value = self.store.get(id).select_rows(rows);
        self.push(value, Op::Gather { param: id, rows: rows.to_vec() })
    }

    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let value = self.value(src).select_rows(rows);
        self.push(value, Op::SelectRows { src, rows: rows.to_vec() })
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(src, &rows)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols(), "column slice out of range");
        let mut out = Tensor::zeros(s.rows(), len);
        for r in 0..s.rows() {
            out.row_mut(r).copy_from_slice(&s.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { src, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        for &p in parts {
            assert_eq!(self.value(p).rows(), rows, "row mismatch in concat_cols");
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut out = Tensor::zeros(0, 0);
        for &p in parts {
            out.push_rows(self.value(p));
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a × bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_vec(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_map(a, b, |p, q| p + q);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_map(a, b, |p, q| p - q);
        self.push(value, Op::Sub(a, b))
    }

    /// Broadcast-add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.broadcast(a, row, |p, q| p + q);
        self.push(value, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of `a` by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.broadcast(a, row, |p, q| p * q);
        self.push(value, Op::MulRow(a, row))
    }

    fn broadcast(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "broadcast operand must be a row");
        assert_eq!(x.cols(), r.cols(), "broadcast width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &q) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, q);
            }
        }
        out
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.map(a, |v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    /// Multiply `a` by a `1 × 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).scalar_value();
        let value = self.map(a, |v| v * k);
        self.push(value, Op::ScaleBy(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::sin);
        self.push(value, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::cos);
        self.push(value, Op::Cos(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.map(a, softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Zero-mean, unit-variance per row (layer norm without the affine part).
    pub fn standardize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::Standardize { src: a, inv_std })
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let s = self.standardize(a);
        let g = self.mul_row(s, gain);
        self.add_row(g, bias)
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { src: a, norms })
    }

    /// Row-wise softmax where row `i` sees columns `0..=offset + i`, with
    /// `offset = cols - rows` (queries are the trailing positions).
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.cols() >= x.rows(), "causal softmax needs cols >= rows");
        let offset = x.cols() - x.rows();
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let visible = offset + r + 1;
            let src = &x.row(r)[..visible];
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.row_mut(r)[..visible];
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        self.push(out, Op::CausalSoftmax { src: a })
    }

    /// Per-row logQ-corrected sampled softmax cross-entropy.
    ///
    /// `preds` is `R × D`, `cands` is `M × D`, `scale` is the `1 × 1`
    /// similarity scale. Output is `R × 1`.
    pub fn sampled_softmax(&mut self, preds: Var, cands: Var, scale: Var, spec: SampledSoftmaxSpec) -> Var {
        let p = self.value(preds);
        let c = self.value(cands);
        let lambda = self.value(scale).scalar_value();
        assert_eq!(spec.targets.len(), p.rows(), "one target per prediction row");
        assert_eq!(spec.cand_ids.len(), c.rows(), "one id per candidate");
        assert_eq!(spec.log_q.len(), c.rows(), "one log-probability per candidate");
        let dots = p.matmul_t(c);
        let mut probs = Tensor::zeros(p.rows(), c.rows());
        let mut losses = Tensor::zeros(p.rows(), 1);
        let mut logits = vec![0.0; c.rows()];
        for r in 0..p.rows() {
            let mut m = f64::NEG_INFINITY;
            for (ci, l) in logits.iter_mut().enumerate() {
                if spec.included(r, ci) {
                    *l = lambda * dots.get(r, ci) - spec.log_q[ci];
                    m = m.max(*l);
                }
            }
            let mut z = 0.0;
            let prow = probs.row_mut(r);
            for (ci, &l) in logits.iter().enumerate() {
                if spec.included(r, ci) {
                    prow[ci] = (l - m).exp();
                    z += prow[ci];
                }
            }
            prow.iter_mut().for_each(|v| *v /= z);
            let t = spec.targets[r];
            losses.data_mut()[r] = m + z.ln() - logits[t];
        }
        let cache = SampledSoftmaxCache { preds, cands, scale, spec, probs, dots };
        self.push(losses, Op::SampledSoftmax(Box::new(cache)))
    }

    /// Minimum of an `R × 1` column within each group; output `G × 1`.
    pub fn group_min(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), 1, "group_min expects a column");
        let mut out = Tensor::zeros(groups.len(), 1);
        let mut argmin = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty group");
            let best = members
                .iter()
                .copied()
                .min_by(|&i, &j| x.data()[i].total_cmp(&x.data()[j]).then(i.cmp(&j)))
                .expect("non-empty");
            out.data_mut()[g] = x.data()[best];
            argmin.push(best);
        }
        self.push(out, Op::GroupMin { src: a, argmin })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = if x.is_empty() { 0.0 } else { x.data().iter().sum::<f64>() / x.len() as f64 };
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// Backpropagate from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let shape = self.node(out)?.value.shape();
        if shape != (1, 1) {
            return Err(Error::State(format!("backward seed must be scalar, got {shape:?}")));
        }
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Backpropagate an explicit upstream gradient `seed` for node `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        let node = self.node(out)?;
        if node.value.shape() != seed.shape() {
            return Err(Error::State("upstream gradient shape does not match output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        let mut params = Gradients::new(self.store.len());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut params);
        }
        Ok(params)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        self.nodes.get(v.0).ok_or_else(|| Error::State(format!("node {} is not on this tape", v.0)))
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut Gradients) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Const => {}
            Op::Param(id) => params.accumulate_dense(*id, g),
            Op::Gather { param, rows } => params.accumulate_rows(*param, rows, g),
            Op::SelectRows { src, rows } => {
                let s = self.value(*src);
                let acc = slot(grads, *src, s.rows(), s.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, v) in acc.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let s = self.value(*src);
                let acc = slot(grads, *src, s.rows(), s.cols());
                for r in 0..g.rows() {
                    for (d, v) in acc.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let acc = slot(grads, p, g.rows(), pc);
                    for r in 0..g.rows() {
                        for (d, v) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + pc]) {
                            *d += v;
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let acc = slot(grads, p, pr, g.cols());
                    for r in 0..pr {
                        for (d, v) in acc.row_mut(r).iter_mut().zip(g.row(off + r)) {
                            *d += v;
                        }
                    }
                    off += pr;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                gemm(g, false, bv, true, slot(grads, *a, av.rows(), av.cols()), 1.0);
                gemm(av, true, g, false, slot(grads, *b, bv.rows(), bv.cols()), 1.0);
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                gemm(g, false, bv, false, slot(grads, *a, av.rows(), av.cols()), 1.0);
                gemm(g, true, av, false, slot(grads, *b, bv.rows(), bv.cols()), 1.0);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g, 1.0);
                add_into(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, 1.0);
                add_into(grads, *b, g, -1.0);
            }
            Op::AddRow(a, row) => {
                add_into(grads, *a, g, 1.0);
                let acc = slot(grads, *row, 1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let acc = slot(grads, *a, av.rows(), av.cols());
                for r in 0..g.rows() {
                    for ((d, gv), s) in acc.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.data()) {
                        *d += gv * s;
                    }
                }
                let acc = slot(grads, *row, 1, g.cols());
                for r in 0..g.rows() {
                    for ((d, gv), x) in acc.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, s) => add_into(grads, *a, g, *s),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).scalar_value();
                add_into(grads, *a, g, k);
                let ds: f64 = g.data().iter().zip(self.value(*a).data()).map(|(p, q)| p * q).sum();
                slot(grads, *s, 1, 1).data_mut()[0] += ds;
            }
            Op::Relu(a) => self.elementwise_grad(grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(a) => self.elementwise_grad(grads, *a, g, |x, _| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }),
            Op::Sin(a) => self.elementwise_grad(grads, *a, g, |x, _| x.cos()),
            Op::Cos(a) => self.elementwise_grad(grads, *a, g, |x, _| -x.sin()),
            Op::Softplus(a) => self.elementwise_grad(grads, *a, g, |x, _| sigmoid(x)),
            Op::Standardize { src, inv_std } => {
                let n = y.cols() as f64;
                let acc = slot(grads, *src, y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &gv), &yv) in acc.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::L2Normalize { src, norms } => {
                let acc = slot(grads, *src, y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in acc.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += (gv - yv * proj) / norms[r];
                    }
                }
            }
            Op::CausalSoftmax { src } => {
                let acc = slot(grads, *src, y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in acc.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - inner);
                    }
                }
            }
            Op::SampledSoftmax(cache) => self.sampled_softmax_grad(cache, g, grads),
            Op::GroupMin { src, argmin } => {
                let s = self.value(*src);
                let acc = slot(grads, *src, s.rows(), 1);
                for (k, &j) in argmin.iter().enumerate() {
                    acc.data_mut()[j] += g.data()[k];
                }
            }
            Op::Sum(a) => {
                let s = self.value(*a);
                let k = g.scalar_value();
                slot(grads, *a, s.rows(), s.cols()).data_mut().iter_mut().for_each(|d| *d += k);
            }
            Op::Mean(a) => {
                let s = self.value(*a);
                if !s.is_empty() {
                    let k = g.scalar_value() / s.len() as f64;
                    slot(grads, *a, s.rows(), s.cols()).data_mut().iter_mut().for_each(|d| *d += k);
                }
            }
            Op::SumSquares(a) => {
                let s = self.value(*a);
                let k = 2.0 * g.scalar_value();
                let acc = slot(grads, *a, s.rows(), s.cols());
                for (d, x) in acc.data_mut().iter_mut().zip(s.data()) {
                    *d += k * x;
                }
            }
        }
    }

    fn elementwise_grad(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, d: impl Fn(f64, f64) -> f64) {
        let x = self.value(a);
        let acc = slot(grads, a, x.rows(), x.cols());
        for ((o, &xv), &gv) in acc.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            *o += gv * d(xv, gv);
        }
    }

    fn sampled_softmax_grad(&self, c: &SampledSoftmaxCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let lambda = self.value(c.scale).scalar_value();
        let (rows, cols) = c.probs.shape();
        // dL/dlogit = upstream · (p − onehot(target))
        let mut dlogit = c.probs.clone();
        for r in 0..rows {
            let up = g.data()[r];
            let row = dlogit.row_mut(r);
            row[c.spec.targets[r]] -= 1.0;
            row.iter_mut().for_each(|v| *v *= up);
        }
        let dscale: f64 = dlogit.data().iter().zip(c.dots.data()).map(|(a, b)| a * b).sum();
        slot(grads, c.scale, 1, 1).data_mut()[0] += dscale;
        dlogit.scale_assign(lambda);
        let pv = self.value(c.preds);
        let cv = self.value(c.cands);
        debug_assert_eq!((pv.rows(), cv.rows()), (rows, cols));
        gemm(&dlogit, false, cv, false, slot(grads, c.preds, pv.rows(), pv.cols()), 1.0);
        gemm(&dlogit, true, pv, false, slot(grads, c.cands, cv.rows(), cv.cols()), 1.0);
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn add_into(grads: &mut [Option<Tensor>], v: Var, g: &Tensor, k: f64) {
    let acc = slot(grads, v, g.rows(), g.cols());
    for (d, s) in acc.data_mut().iter_mut().zip(g.data()) {
        *d += k * s;
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
