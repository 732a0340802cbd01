//! Shared fixture: a small synthetic world, a briefly trained model and an
//! exact index, written once per test binary.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, OnceLock};

use genret::config::Config;
use genret::pipeline::{self, Dataset, TrainOutputs};
use genret::service::{self, AppState};
use genret_core::serving::Engine;

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub cfg: Config,
    pub data: PathBuf,
    pub model: PathBuf,
    pub index: PathBuf,
}

pub fn small_config() -> Config {
    Config::parse(
        "[world]\nnum_items = 1500\nnum_queries = 60\nnum_users = 300\nseed = 7\n\
         [training]\nepochs = 2\n\
         [eval]\neval_percent = 20\nnum_negatives = 1500\n",
    )
    .expect("fixture config")
}

fn build() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    let cfg = small_config();
    let data = root.join("data");
    pipeline::synth(&cfg, &data).expect("synth");
    let dataset = Dataset::load(&data).expect("load");
    let model = root.join("model.grck");
    let (trained, _) = pipeline::train_model(&cfg, &dataset, &model, &TrainOutputs::default()).expect("train");
    let index = root.join("items.idx");
    let idx = pipeline::build_index(&cfg.index, &trained, &dataset.catalog).expect("index");
    pipeline::write_index(&idx, &index).expect("write index");
    Fixture { _dir: dir, root, cfg, data, model, index }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(build)
}

impl Fixture {
    pub fn engine(&self) -> Engine {
        pipeline::build_engine(&self.cfg, &self.model, &self.index, &self.data).expect("engine")
    }

    /// Users with at least `min` stored events, ascending by id.
    pub fn users(&self, min: usize) -> Vec<u64> {
        let data = Dataset::load(&self.data).expect("load");
        let mut counts = std::collections::BTreeMap::new();
        for e in &data.events {
            *counts.entry(e.user_id).or_insert(0usize) += 1;
        }
        counts.into_iter().filter(|&(_, n)| n >= min).map(|(u, _)| u).collect()
    }
}

/// A running in-process server on an ephemeral port.
pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub async fn start(engine: Engine) -> Server {
        let state = Arc::new(AppState::new(engine));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
        let base = format!("http://{}", listener.local_addr().expect("addr"));
        let (tx, rx) = tokio::sync::oneshot::channel();
        let handle = tokio::spawn(service::serve(listener, state.clone(), async {
            let _ = rx.await;
        }));
        Server { base, state, stop: Some(tx), handle: Some(handle) }
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().expect("running").send(());
        self.handle.take().expect("running").await.expect("join").expect("serve");
    }
}

/// Starts `genret serve` with `args` on an ephemeral port and returns the
/// child with the base URL it printed.
pub fn spawn_serve(args: &[&str]) -> (Child, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_genret"))
        .arg("serve")
        .args(args)
        .args(["--port", "0"])
        .env("GENRET_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn genret serve");
    let mut line = String::new();
    BufReader::new(child.stdout.take().expect("stdout")).read_line(&mut line).expect("banner");
    let base = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
    (child, base)
}
