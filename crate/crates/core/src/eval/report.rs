//! CSV reports.
//!
//! * eval: `surface,mode,recall_at_<k>,prop_unique,users`
//! * lift: `conditioned_action,true_action,oc_recall,uc_recall,lift`
//! * sweep: `g,steps,recall_at_<k>,prop_unique,wall_clock_ms`
//!
//! Absent values are empty fields.

use std::path::Path;

use super::{summarize, Evaluator, LiftMatrix, SweepRow};
use crate::error::{Error, Result};
use crate::events::surfaces;
use crate::generation::GenerationRequest;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// Surface name, or `all`.
    pub surface: String,
    pub mode: String,
    pub recall: f64,
    pub prop_unique: f64,
    pub users: usize,
}

fn surface_name(s: usize) -> String {
    surfaces::NAMES.get(s).map_or_else(|| format!("surface_{s}"), |n| n.to_string())
}

/// One row per surface with held-out users, plus an `all` row.
pub fn evaluate_by_surface<F>(evaluator: &Evaluator<'_>, model: &Model, mode: &str, request: F) -> Result<Vec<EvalRow>>
where
    F: Fn(&super::EvalCase) -> GenerationRequest + Sync,
{
    let outcomes = evaluator.run(model, request)?;
    let mut present: Vec<usize> = outcomes.iter().map(|o| o.surface).collect();
    present.sort_unstable();
    present.dedup();
    let mut rows = Vec::new();
    for s in present {
        let subset: Vec<_> = outcomes.iter().filter(|o| o.surface == s).cloned().collect();
        let m = summarize(&subset)?;
        rows.push(EvalRow { surface: surface_name(s), mode: mode.into(), recall: m.recall, prop_unique: m.prop_unique, users: m.users });
    }
    let m = summarize(&outcomes)?;
    rows.push(EvalRow { surface: "all".into(), mode: mode.into(), recall: m.recall, prop_unique: m.prop_unique, users: m.users });
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::State(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn write_eval_csv(path: impl AsRef<Path>, k: usize, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["surface", "mode", &format!("recall_at_{k}"), "prop_unique", "users"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.surface.clone(), r.mode.clone(), format!("{:.6}", r.recall), format!("{:.6}", r.prop_unique), r.users.to_string()])
            .map_err(csv_err)?;
    }
    Ok(w.flush()?)
}

pub fn write_lift_csv(path: impl AsRef<Path>, m: &LiftMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["conditioned_action", "true_action", "oc_recall", "uc_recall", "lift"]).map_err(csv_err)?;
    for a in 0..m.num_actions() {
        for b in 0..m.num_actions() {
            w.write_record([a.to_string(), b.to_string(), opt(m.oc_recall[a][b]), opt(m.uc_recall[b]), opt(m.lift[a][b])])
                .map_err(csv_err)?;
        }
    }
    Ok(w.flush()?)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, k: usize, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["g", "steps", &format!("recall_at_{k}"), "prop_unique", "wall_clock_ms"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.g.to_string(),
            r.steps.to_string(),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.prop_unique),
            format!("{:.3}", r.wall_clock.as_secs_f64() * 1e3),
        ])
        .map_err(csv_err)?;
    }
    Ok(w.flush()?)
}
