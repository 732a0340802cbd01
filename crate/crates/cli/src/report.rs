//! SVG charts from the evaluation CSVs: a conditioned-lift heatmap, the
//! multi-token tradeoff curves and per-surface recall bars.

use std::fmt::Write;
use std::path::Path;

use serde::Deserialize;

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct LiftCell {
    pub conditioned_action: usize,
    pub true_action: usize,
    pub oc_recall: Option<f64>,
    pub uc_recall: Option<f64>,
    pub lift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub g: usize,
    pub steps: usize,
    pub recall: f64,
    pub prop_unique: f64,
    pub wall_clock_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub surface: String,
    pub mode: String,
    pub recall: f64,
    pub prop_unique: f64,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, String> {
    csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn column(headers: &csv::StringRecord, prefix: &str, path: &Path) -> Result<usize, String> {
    headers
        .iter()
        .position(|h| h.starts_with(prefix))
        .ok_or_else(|| format!("{}: missing column {prefix}", path.display()))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T, String> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("{}: bad value in line {}", path.display(), rec.position().map_or(0, |p| p.line())))
}

pub fn read_lift(path: &Path) -> Result<Vec<LiftCell>, String> {
    reader(path)?.deserialize().map(|r| r.map_err(|e| format!("{}: {e}", path.display()))).collect()
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepPoint>, String> {
    let mut r = reader(path)?;
    let h = r.headers().map_err(|e| e.to_string())?.clone();
    let cols = [
        column(&h, "g", path)?,
        column(&h, "steps", path)?,
        column(&h, "recall_at_", path)?,
        column(&h, "prop_unique", path)?,
        column(&h, "wall_clock_ms", path)?,
    ];
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        out.push(SweepPoint {
            g: field(&rec, cols[0], path)?,
            steps: field(&rec, cols[1], path)?,
            recall: field(&rec, cols[2], path)?,
            prop_unique: field(&rec, cols[3], path)?,
            wall_clock_ms: field(&rec, cols[4], path)?,
        });
    }
    out.sort_by_key(|p| p.g);
    Ok(out)
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalPoint>, String> {
    let mut r = reader(path)?;
    let h = r.headers().map_err(|e| e.to_string())?.clone();
    let cols = [column(&h, "surface", path)?, column(&h, "mode", path)?, column(&h, "recall_at_", path)?, column(&h, "prop_unique", path)?];
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        out.push(EvalPoint {
            surface: field(&rec, cols[0], path)?,
            mode: field(&rec, cols[1], path)?,
            recall: field(&rec, cols[2], path)?,
            prop_unique: field(&rec, cols[3], path)?,
        });
    }
    Ok(out)
}

const FONT: &str = "font-family=\"sans-serif\" font-size=\"12\"";

fn svg_open(w: f64, h: f64) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n")
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, s: &str) {
    let _ = writeln!(out, "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" {FONT}>{s}</text>");
}

/// Blue (negative) through white to red (positive), saturating at `scale`.
fn diverging(v: f64, scale: f64) -> String {
    let t = (v / scale.max(1e-12)).clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
    let (r, g, b) = if t >= 0.0 { (fade(178.0), fade(24.0), fade(43.0)) } else { (fade(33.0), fade(102.0), fade(172.0)) };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Rows: conditioned action; columns: the action users actually took.
pub fn lift_heatmap_svg(cells: &[LiftCell]) -> String {
    let n = cells.iter().map(|c| c.conditioned_action.max(c.true_action) + 1).max().unwrap_or(0);
    let cell = 64.0;
    let (left, top) = (110.0, 60.0);
    let size = n as f64 * cell;
    let scale = cells.iter().filter_map(|c| c.lift).map(f64::abs).fold(0.0, f64::max);
    let mut out = svg_open(left + size + 30.0, top + size + 50.0);
    text(&mut out, left + size / 2.0, 24.0, "middle", "Recall lift of conditioned over unconditioned generation");
    for c in cells {
        let x = left + c.true_action as f64 * cell;
        let y = top + c.conditioned_action as f64 * cell;
        let fill = c.lift.map_or_else(|| "#dddddd".to_string(), |v| diverging(v, scale));
        let _ = writeln!(out, "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"white\"/>");
        let label = c.lift.map_or_else(|| "n/a".to_string(), |v| format!("{:+.1}%", v * 100.0));
        text(&mut out, x + cell / 2.0, y + cell / 2.0 + 4.0, "middle", &label);
    }
    for a in 0..n {
        let mid = a as f64 * cell + cell / 2.0;
        text(&mut out, left + mid, top + size + 18.0, "middle", &format!("a{a}"));
        text(&mut out, left - 8.0, top + mid + 4.0, "end", &format!("cond a{a}"));
    }
    text(&mut out, left + size / 2.0, top + size + 40.0, "middle", "engaged action");
    out.push_str("</svg>\n");
    out
}

struct Panel<'a> {
    title: &'a str,
    values: Vec<f64>,
}

/// One panel per metric, x = log2(g).
pub fn tradeoff_svg(points: &[SweepPoint]) -> String {
    let panels = [
        Panel { title: "recall@k", values: points.iter().map(|p| p.recall).collect() },
        Panel { title: "proportion unique", values: points.iter().map(|p| p.prop_unique).collect() },
        Panel { title: "wall clock (ms)", values: points.iter().map(|p| p.wall_clock_ms).collect() },
    ];
    let (pw, ph, margin) = (260.0, 200.0, 50.0);
    let mut out = svg_open(panels.len() as f64 * (pw + margin) + margin, ph + 2.0 * margin + 20.0);
    let xs: Vec<f64> = points.iter().map(|p| (p.g.max(1) as f64).log2()).collect();
    let x_max = xs.iter().copied().fold(1.0, f64::max);
    for (i, panel) in panels.iter().enumerate() {
        let x0 = margin + i as f64 * (pw + margin);
        let y0 = margin;
        let hi = panel.values.iter().copied().fold(f64::MIN, f64::max);
        let lo = panel.values.iter().copied().fold(f64::MAX, f64::min).min(0.0);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |x: f64| x0 + x / x_max * pw;
        let py = |v: f64| y0 + ph - (v - lo) / span * ph;
        let _ = writeln!(out, "<rect x=\"{x0}\" y=\"{y0}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>");
        text(&mut out, x0 + pw / 2.0, y0 - 12.0, "middle", panel.title);
        let path: Vec<String> = xs.iter().zip(&panel.values).map(|(&x, &v)| format!("{:.1},{:.1}", px(x), py(v))).collect();
        let _ = writeln!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"#b2182b\" stroke-width=\"2\"/>", path.join(" "));
        for ((&x, &v), p) in xs.iter().zip(&panel.values).zip(points) {
            let _ = writeln!(out, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#b2182b\"/>", px(x), py(v));
            text(&mut out, px(x), y0 + ph + 16.0, "middle", &p.g.to_string());
        }
        text(&mut out, x0 - 4.0, y0 + 4.0, "end", &format!("{hi:.3}"));
        text(&mut out, x0 - 4.0, y0 + ph, "end", &format!("{lo:.3}"));
        text(&mut out, x0 + pw / 2.0, y0 + ph + 34.0, "middle", "tokens per step (g)");
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars of recall per surface, one bar per mode.
pub fn eval_bars_svg(points: &[EvalPoint]) -> String {
    let mut surfaces: Vec<&str> = Vec::new();
    let mut modes: Vec<&str> = Vec::new();
    for p in points {
        if !surfaces.contains(&p.surface.as_str()) {
            surfaces.push(&p.surface);
        }
        if !modes.contains(&p.mode.as_str()) {
            modes.push(&p.mode);
        }
    }
    let palette = ["#2166ac", "#b2182b", "#1b7837", "#762a83", "#e08214"];
    let (bar, gap, h, left, top) = (22.0, 24.0, 220.0, 60.0, 50.0);
    let group = modes.len() as f64 * bar + gap;
    let width = left + surfaces.len() as f64 * group + 140.0;
    let hi = points.iter().map(|p| p.recall).fold(0.0, f64::max).max(1e-9);
    let mut out = svg_open(width, top + h + 60.0);
    text(&mut out, width / 2.0, 24.0, "middle", "recall@k by surface");
    let _ = writeln!(out, "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\"/>", top + h, width - 140.0, top + h);
    text(&mut out, left - 4.0, top + 4.0, "end", &format!("{hi:.3}"));
    for (si, s) in surfaces.iter().enumerate() {
        let gx = left + gap / 2.0 + si as f64 * group;
        for (mi, m) in modes.iter().enumerate() {
            if let Some(p) = points.iter().find(|p| p.surface == *s && p.mode == *m) {
                let bh = p.recall / hi * h;
                let x = gx + mi as f64 * bar;
                let _ = writeln!(
                    out,
                    "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>",
                    top + h - bh,
                    bar - 2.0,
                    palette[mi % palette.len()]
                );
            }
        }
        text(&mut out, gx + modes.len() as f64 * bar / 2.0, top + h + 18.0, "middle", s);
    }
    for (mi, m) in modes.iter().enumerate() {
        let y = top + 10.0 + mi as f64 * 18.0;
        let x = width - 120.0;
        let _ = writeln!(out, "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>", y - 10.0, palette[mi % palette.len()]);
        text(&mut out, x + 18.0, y, "start", m);
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `lift_heatmap.svg`, `mt_tradeoff.svg` and `recall_by_surface.svg`
/// for whichever inputs are given; returns the files written.
pub fn render(
    out_dir: &Path,
    eval: &[std::path::PathBuf],
    lift: Option<&Path>,
    sweep: Option<&Path>,
) -> Result<Vec<std::path::PathBuf>, String> {
    std::fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let mut charts = Vec::new();
    if let Some(p) = lift {
        charts.push(("lift_heatmap.svg", lift_heatmap_svg(&read_lift(p)?)));
    }
    if let Some(p) = sweep {
        charts.push(("mt_tradeoff.svg", tradeoff_svg(&read_sweep(p)?)));
    }
    if !eval.is_empty() {
        let mut points = Vec::new();
        for p in eval {
            points.extend(read_eval(p)?);
        }
        charts.push(("recall_by_surface.svg", eval_bars_svg(&points)));
    }
    if charts.is_empty() {
        return Err("nothing to render: pass --eval, --lift or --sweep".into());
    }
    let mut written = Vec::new();
    for (name, svg) in charts {
        let path = out_dir.join(name);
        std::fs::write(&path, svg).map_err(|e| format!("{}: {e}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
