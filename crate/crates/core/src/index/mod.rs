//! Inner-product nearest-neighbour index over item embeddings.
//!
//! Two modes share one interface: exact (brute force) and IVF-flat, whose
//! partitions come from spherical k-means. Ties are broken by ascending item
//! id so results are fully deterministic.

mod file;
mod retrieve;

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use file::{load_index, read_index, save_index, write_index, INDEX_MAGIC};
pub use retrieve::{retrieve_for_batch, RetrievalResult, RetrievedItem};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Ivf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item_id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Ivf {
    pub centroids: Tensor,
    /// Row indices into the index, ascending within each list.
    pub lists: Vec<Vec<u32>>,
    pub nprobe: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemIndex {
    ids: Vec<u64>,
    vectors: Tensor,
    ivf: Option<Ivf>,
}

/// Descending score, then ascending id.
fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id))
}

fn top_n(mut all: Vec<Neighbor>, n: usize) -> Vec<Neighbor> {
    if n < all.len() {
        all.select_nth_unstable_by(n, rank_order);
        all.truncate(n);
    }
    all.sort_by(rank_order);
    all
}

impl ItemIndex {
    /// Exact index. Vectors must be unit-norm and ids unique.
    pub fn build(ids: Vec<u64>, vectors: Tensor) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("cannot build an index over zero items"));
        }
        if ids.len() != vectors.rows() {
            return Err(Error::validation("one vector per id is required"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(d) = ids.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::validation(format!("duplicate item id {d} in index")));
        }
        if let Some(r) = (0..vectors.rows()).find(|&r| (l2_norm(vectors.row(r)) - 1.0).abs() > 1e-6) {
            return Err(Error::validation(format!("vector of item {} is not unit-norm", ids[r])));
        }
        Ok(ItemIndex { ids, vectors, ivf: None })
    }

    /// IVF-flat index; `num_partitions` is clamped to the item count.
    pub fn build_ivf(ids: Vec<u64>, vectors: Tensor, num_partitions: usize, iters: usize, nprobe: usize, seed: u64) -> Result<Self> {
        let mut index = Self::build(ids, vectors)?;
        let p = num_partitions.clamp(1, index.len());
        let centroids = spherical_kmeans(&index.vectors, p, iters, seed);
        let mut lists = vec![Vec::new(); p];
        for r in 0..index.len() {
            lists[nearest(&centroids, index.vectors.row(r))].push(r as u32);
        }
        index.ivf = Some(Ivf { centroids, lists, nprobe: nprobe.clamp(1, p) });
        Ok(index)
    }

    pub(crate) fn from_parts(ids: Vec<u64>, vectors: Tensor, ivf: Option<Ivf>) -> Self {
        ItemIndex { ids, vectors, ivf }
    }

    pub(crate) fn ivf(&self) -> Option<&Ivf> {
        self.ivf.as_ref()
    }

    pub fn mode(&self) -> IndexMode {
        if self.ivf.is_some() { IndexMode::Ivf } else { IndexMode::Exact }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn num_partitions(&self) -> usize {
        self.ivf.as_ref().map_or(1, |i| i.lists.len())
    }

    pub fn set_nprobe(&mut self, nprobe: usize) {
        if let Some(ivf) = &mut self.ivf {
            ivf.nprobe = nprobe.clamp(1, ivf.lists.len());
        }
    }

    /// Top `k · overfetch` items by inner product (the whole ranking when
    /// that exceeds the index size).
    pub fn knn(&self, query: &[f64], k: usize, overfetch: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if query.len() != self.dim() {
            return Err(Error::validation(format!("query has dim {}, index has {}", query.len(), self.dim())));
        }
        let n = k.saturating_mul(overfetch.max(1));
        let score = |r: usize| Neighbor { item_id: self.ids[r], score: dot(self.vectors.row(r), query) };
        let all: Vec<Neighbor> = match &self.ivf {
            None => (0..self.len()).map(score).collect(),
            Some(ivf) => {
                let mut parts: Vec<(usize, f64)> =
                    (0..ivf.lists.len()).map(|p| (p, dot(ivf.centroids.row(p), query))).collect();
                parts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                parts[..ivf.nprobe].iter().flat_map(|&(p, _)| ivf.lists[p].iter().map(|&r| score(r as usize))).collect()
            }
        };
        Ok(top_n(all, n))
    }
}

fn nearest(centroids: &Tensor, v: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..centroids.rows() {
        let s = dot(centroids.row(c), v);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// k-means on the unit sphere: assign by inner product, renormalised means.
/// Empty clusters keep their previous centroid.
fn spherical_kmeans(x: &Tensor, k: usize, iters: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = sample(&mut rng, x.rows(), k).into_vec();
    rows.sort_unstable();
    let mut centroids = x.select_rows(&rows);
    for _ in 0..iters {
        let mut sums = Tensor::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for r in 0..x.rows() {
            let c = nearest(&centroids, x.row(r));
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            let norm = l2_norm(sums.row(c));
            if counts[c] > 0 && norm > 0.0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / norm;
                }
            }
        }
    }
    centroids
}
