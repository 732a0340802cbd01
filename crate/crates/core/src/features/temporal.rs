//! Sinusoidal encodings of absolute time and time since the previous event.
//!
//! Layout: `[sin(t/p_1), cos(t/p_1), …, sin(t/p_m), cos(t/p_m)]` for the
//! absolute periods, followed by `sin(dt·ω_j + φ_j)` for all `j` and then
//! `cos(dt·ω_j + φ_j)` for all `j`. Relative frequencies are log-spaced,
//! `ω_j = base^-j`, and the phases `φ_j` are learned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HOUR: f64 = 3600.0;
pub const DAY: f64 = 86_400.0;
pub const YEAR: f64 = 365.0 * DAY;

pub const PHASE_PARAM: &str = "time.rel_phase";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalEncoderConfig {
    /// Absolute periods in seconds.
    pub abs_periods: Vec<f64>,
    pub rel_num_freqs: usize,
    pub rel_log_base: f64,
}

impl Default for TemporalEncoderConfig {
    fn default() -> Self {
        let rel_num_freqs = 8;
        TemporalEncoderConfig {
            abs_periods: vec![HOUR, DAY, 7.0 * DAY, 30.0 * DAY, YEAR],
            rel_num_freqs,
            // base^(n-1) spans 1 s .. 1 year
            rel_log_base: YEAR.powf(1.0 / (rel_num_freqs - 1) as f64),
        }
    }
}

impl TemporalEncoderConfig {
    pub fn dim(&self) -> usize {
        2 * self.abs_periods.len() + 2 * self.rel_num_freqs
    }

    pub fn rel_frequencies(&self) -> Vec<f64> {
        (0..self.rel_num_freqs).map(|j| self.rel_log_base.powi(-(j as i32))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.abs_periods.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::validation("absolute periods must be positive"));
        }
        let mut sorted = self.abs_periods.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("absolute periods must be distinct"));
        }
        if self.rel_num_freqs > 0 && !(self.rel_log_base > 1.0) {
            return Err(Error::validation("relative log base must exceed 1"));
        }
        Ok(())
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::validation(format!("time since previous event must be >= 0, got {dt}")));
    }
    Ok(())
}

/// Encodes one timestamp with explicit phases (`phases.len() == rel_num_freqs`).
pub fn encode_time(t_abs: f64, dt: f64, cfg: &TemporalEncoderConfig, phases: &[f64]) -> Result<Vec<f64>> {
    check_dt(dt)?;
    if phases.len() != cfg.rel_num_freqs {
        return Err(Error::validation("phase count does not match rel_num_freqs"));
    }
    let mut out = Vec::with_capacity(cfg.dim());
    for &p in &cfg.abs_periods {
        out.push((t_abs / p).sin());
        out.push((t_abs / p).cos());
    }
    let freqs = cfg.rel_frequencies();
    out.extend(freqs.iter().zip(phases).map(|(w, ph)| (dt * w + ph).sin()));
    out.extend(freqs.iter().zip(phases).map(|(w, ph)| (dt * w + ph).cos()));
    Ok(out)
}

/// Batched encoder on the tape; `times` holds `(t_abs, dt)` pairs.
/// The learned phases are read from [`PHASE_PARAM`].
pub fn encode_times(tape: &mut Tape<'_>, times: &[(f64, f64)], cfg: &TemporalEncoderConfig) -> Result<Var> {
    let n = times.len();
    let m = cfg.abs_periods.len();
    let mut abs = Tensor::zeros(n, 2 * m);
    for (r, &(t, dt)) in times.iter().enumerate() {
        check_dt(dt)?;
        let row = abs.row_mut(r);
        for (i, &p) in cfg.abs_periods.iter().enumerate() {
            row[2 * i] = (t / p).sin();
            row[2 * i + 1] = (t / p).cos();
        }
    }
    let abs = tape.constant(abs);
    if cfg.rel_num_freqs == 0 {
        return Ok(abs);
    }
    let freqs = cfg.rel_frequencies();
    let mut args = Tensor::zeros(n, cfg.rel_num_freqs);
    for (r, &(_, dt)) in times.iter().enumerate() {
        for (a, w) in args.row_mut(r).iter_mut().zip(&freqs) {
            *a = dt * w;
        }
    }
    let args = tape.constant(args);
    let phase = tape.param_by_name(PHASE_PARAM);
    let shifted = tape.add_row(args, phase);
    let s = tape.sin(shifted);
    let c = tape.cos(shifted);
    Ok(tape.concat_cols(&[abs, s, c]))
}
