mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::fixture;

fn genret() -> Command {
    Command::new(env!("CARGO_BIN_EXE_genret"))
}

fn run(args: &[&str]) -> Output {
    genret().args(args).env("GENRET_LOG", "warn").output().expect("spawn genret")
}

fn config_file(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, toml::to_string(&fixture().cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_config_exits_nonzero_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[training]\nlearning_rate = 0.1\n", "learning_rate"),
        ("[world]\nnum_items = \"many\"\n", "num_items"),
        ("[eval]\nk = 0\n", "[eval]"),
        ("[engine]\nmax_items = 0\n", "max_items"),
    ];
    for (text, key) in cases {
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text).unwrap();
        let out = run(&["--config", s(&path), "synth", "--out", s(&dir.path().join("d"))]);
        assert!(!out.status.success(), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{key} not in: {err}");
    }
}

#[test]
fn eval_writes_the_csv_schema() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path());
    let csv = dir.path().join("oc.csv");
    let out = run(&["--config", s(&cfg), "eval", "--model", s(&f.model), "--data", s(&f.data), "--mode", "oc", "--k", "10", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("surface,mode,recall_at_10,prop_unique"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.last().unwrap()[0], "all");
    assert!(rows.iter().all(|r| r[1] == "oc"));
    for r in &rows {
        let recall: f64 = r[2].parse().unwrap();
        let unique: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&recall) && unique > 0.0 && unique <= 1.0);
    }
}

#[test]
fn report_renders_charts_from_eval_csvs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path());
    let (eval, lift, sweep) = (dir.path().join("e.csv"), dir.path().join("l.csv"), dir.path().join("s.csv"));
    let out = run(&[
        "--config", s(&cfg), "eval", "--model", s(&f.model), "--data", s(&f.data), "--mode", "mt", "--out", s(&eval),
        "--uc-model", s(&f.model), "--lift-out", s(&lift), "--sweep-out", s(&sweep), "--sweep-g", "1,2,4",
        "--sweep-total", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let charts = dir.path().join("charts");
    let out = run(&["report", "--eval", s(&eval), "--lift", s(&lift), "--sweep", s(&sweep), "--out", s(&charts)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["lift_heatmap.svg", "mt_tradeoff.svg", "recall_by_surface.svg"] {
        let svg = std::fs::read_to_string(charts.join(name)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{name}");
    }
    assert!(!run(&["report", "--out", s(&charts)]).status.success());
}

#[test]
fn index_query_prints_k_neighbours() {
    let f = fixture();
    let data = genret::pipeline::Dataset::load(&f.data).unwrap();
    let pin = data.catalog.pins().nth(3).unwrap().item_id.to_string();
    let out = run(&["index", "query", "--model", s(&f.model), "--index", s(&f.index), "--data", s(&f.data), "--item-id", &pin, "--k", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    // An item's nearest neighbour is itself.
    assert_eq!(lines[0]["item_id"].to_string(), pin);
}

#[test]
fn serve_on_port_zero_prints_the_bound_port() {
    let f = fixture();
    let (mut child, addr) = common::spawn_serve(&["--model", s(&f.model), "--index", s(&f.index), "--data", s(&f.data)]);
    let port: u16 = addr.rsplit(':').next().unwrap().parse().unwrap();
    assert_ne!(port, 0);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let health: serde_json::Value = rt.block_on(async { reqwest::get(format!("{addr}/healthz")).await.unwrap().json().await.unwrap() });
    assert_eq!(health["status"], "ok");
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn synth_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_file(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["--config", s(&cfg), "synth", "--out", s(out), "--seed", "3"]).status.success());
    }
    for file in ["items.grif", "events.jsonl", "signals/batch.jsonl", "signals/realtime.log"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let rt = std::fs::metadata(a.join("signals/realtime.log")).unwrap().len();
    assert!(rt > 0, "the realtime log should hold the newest events");
}
