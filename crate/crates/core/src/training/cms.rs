//! Count-min sketch supplying item sampling frequencies.

use serde::{Deserialize, Serialize};

use crate::features::{seeded_hash, splitmix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMinSketch {
    width: usize,
    depth: usize,
    seeds: Vec<u64>,
    counters: Vec<u64>,
    total: u64,
}

impl CountMinSketch {
    pub fn new(width: usize, depth: usize, seed: u64) -> Self {
        assert!(width > 0 && depth > 0, "sketch dimensions must be positive");
        let seeds = (0..depth as u64).map(|r| splitmix64(seed ^ splitmix64(r.wrapping_add(0x5eed)))).collect();
        CountMinSketch { width, depth, seeds, counters: vec![0; width * depth], total: 0 }
    }

    /// Sketch sized for additive error `eps·N` with failure probability `delta`
    /// per query: `w = ⌈2/eps⌉`, `d = ⌈log2(1/delta)⌉`.
    pub fn with_error(eps: f64, delta: f64, seed: u64) -> Self {
        let w = (2.0 / eps).ceil() as usize;
        let d = (1.0 / delta).log2().ceil().max(1.0) as usize;
        Self::new(w, d, seed)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn cell(&self, row: usize, item: u64) -> usize {
        row * self.width + (seeded_hash(item, self.seeds[row]) % self.width as u64) as usize
    }

    pub fn update(&mut self, item: u64) {
        self.add(item, 1);
    }

    pub fn add(&mut self, item: u64, count: u64) {
        for r in 0..self.depth {
            let c = self.cell(r, item);
            self.counters[c] += count;
        }
        self.total += count;
    }

    pub fn estimate(&self, item: u64) -> u64 {
        (0..self.depth).map(|r| self.counters[self.cell(r, item)]).min().unwrap_or(0)
    }

    /// Sum of one counter row; equals `total` for every row.
    pub fn row_sum(&self, row: usize) -> u64 {
        self.counters[row * self.width..(row + 1) * self.width].iter().sum()
    }

    /// `log(estimate / N)` floored at `log(1/N)`; 0 before any update.
    pub fn log_q(&self, item: u64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        (self.estimate(item).max(1) as f64 / n).ln()
    }
}
