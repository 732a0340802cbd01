//! HTTP/JSON retrieval service.
//!
//! * `POST /retrieve`: [`RetrieveRequest`] → [`RetrieveResponse`]
//! * `GET /healthz`: liveness
//! * `GET /stats`: request counters, latency quantiles, step counts
//! * `POST /reload`: reopen model, index and signals from disk
//!
//! Handlers hold an `Arc` to the current engine snapshot for the whole
//! request, so a reload never changes weights under an in-flight request.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use genret_core::serving::{Engine, RetrieveRequest, WIRE_VERSION};
use genret_core::Error;
use serde::Serialize;
use serde_json::json;

/// Latency samples kept for the quantiles.
const LATENCY_WINDOW: usize = 4096;

type Loader = dyn Fn() -> Result<Engine, String> + Send + Sync;

#[derive(Default)]
struct Stats {
    requests: AtomicU64,
    errors: AtomicU64,
    items: AtomicU64,
    latencies_ms: Mutex<VecDeque<f64>>,
    steps: Mutex<BTreeMap<usize, u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct StatsSnapshot {
    pub v: u32,
    pub requests: u64,
    pub errors: u64,
    pub items_returned: u64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    /// Successful requests by autoregressive step count.
    pub steps: BTreeMap<usize, u64>,
    pub total_steps: u64,
}

/// Nearest-rank quantile of sorted samples; 0 when empty.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub struct AppState {
    engine: RwLock<Arc<Engine>>,
    loader: Option<Box<Loader>>,
    stats: Stats,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState { engine: RwLock::new(Arc::new(engine)), loader: None, stats: Stats::default() }
    }

    /// `loader` rebuilds the engine on `POST /reload`.
    pub fn with_loader(engine: Engine, loader: impl Fn() -> Result<Engine, String> + Send + Sync + 'static) -> Self {
        AppState { loader: Some(Box::new(loader)), ..AppState::new(engine) }
    }

    pub fn engine(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock").clone()
    }

    pub fn swap(&self, engine: Engine) {
        *self.engine.write().expect("engine lock") = Arc::new(engine);
    }

    pub fn stats(&self) -> StatsSnapshot {
        let mut lat: Vec<f64> = self.stats.latencies_ms.lock().expect("stats lock").iter().copied().collect();
        lat.sort_by(f64::total_cmp);
        let steps = self.stats.steps.lock().expect("stats lock").clone();
        StatsSnapshot {
            v: WIRE_VERSION,
            requests: self.stats.requests.load(Ordering::Relaxed),
            errors: self.stats.errors.load(Ordering::Relaxed),
            items_returned: self.stats.items.load(Ordering::Relaxed),
            p50_ms: quantile(&lat, 0.5),
            p90_ms: quantile(&lat, 0.9),
            total_steps: steps.iter().map(|(&s, &n)| s as u64 * n).sum(),
            steps,
        }
    }

    fn record(&self, latency_ms: f64, steps: usize, items: usize) {
        self.stats.items.fetch_add(items as u64, Ordering::Relaxed);
        let mut lat = self.stats.latencies_ms.lock().expect("stats lock");
        if lat.len() == LATENCY_WINDOW {
            lat.pop_front();
        }
        lat.push_back(latency_ms);
        drop(lat);
        *self.stats.steps.lock().expect("stats lock").entry(steps).or_default() += 1;
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/healthz", get(healthz))
        .route("/stats", get(stats))
        .route("/reload", post(reload))
        .with_state(state)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn error_response(status: StatusCode, code: &str, reason: String) -> Response {
    (status, Json(json!({ "v": WIRE_VERSION, "error": { "code": code, "reason": reason } }))).into_response()
}

fn classify(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::Validation(_) | Error::Length { .. } => (StatusCode::BAD_REQUEST, "invalid_request"),
        Error::Format(_) | Error::Json(_) => (StatusCode::BAD_REQUEST, "malformed_request"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

async fn retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    state.stats.requests.fetch_add(1, Ordering::Relaxed);
    let req: RetrieveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            state.stats.errors.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_REQUEST, "malformed_request", e.to_string());
        }
    };
    let engine = state.engine();
    let result = tokio::task::spawn_blocking(move || engine.retrieve(&req)).await;
    match result {
        Ok(Ok(resp)) => {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            state.record(ms, resp.steps, resp.items.len());
            log::debug!("retrieve: {} items, {} steps, {ms:.2} ms", resp.items.len(), resp.steps);
            Json(resp).into_response()
        }
        Ok(Err(e)) => {
            state.stats.errors.fetch_add(1, Ordering::Relaxed);
            let (status, code) = classify(&e);
            if status.is_server_error() {
                log::error!("retrieve failed: {e}");
            }
            error_response(status, code, e.to_string())
        }
        Err(e) => {
            state.stats.errors.fetch_add(1, Ordering::Relaxed);
            log::error!("retrieve task failed: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", "request task failed".into())
        }
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "v": WIRE_VERSION, "status": "ok" }))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<StatsSnapshot> {
    Json(state.stats())
}

async fn reload(State(state): State<Arc<AppState>>) -> Response {
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || match &worker.loader {
        None => Err("this server has no reload source".to_string()),
        Some(load) => load().map(|e| worker.swap(e)),
    })
    .await;
    match result {
        Ok(Ok(())) => {
            log::info!("engine reloaded");
            Json(json!({ "v": WIRE_VERSION, "status": "reloaded" })).into_response()
        }
        Ok(Err(reason)) => error_response(StatusCode::CONFLICT, "reload_failed", reason),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}
