mod common;

use std::collections::BTreeMap;

use common::{fixture, Server};
use genret_core::serving::{RetrieveRequest, RetrieveResponse};
use genret_core::generation::GenerationMode;
use genret::service::StatsSnapshot;
use serde_json::{json, Value};

fn request(user_id: u64, mode: GenerationMode, budgets: &[(usize, f64)], total: usize, seed: u64) -> RetrieveRequest {
    RetrieveRequest {
        v: 1,
        user_id,
        surface: 0,
        context_item_id: None,
        mode,
        budgets: budgets.iter().copied().collect(),
        total_items: total,
        num_steps: 1,
        offsets: vec![0],
        seed,
        now: None,
    }
}

async fn post(client: &reqwest::Client, base: &str, body: &impl serde::Serialize) -> (u16, Value) {
    let r = client.post(format!("{base}/retrieve")).json(body).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

fn items(v: &Value) -> Vec<(u64, Option<u64>)> {
    let resp: RetrieveResponse = serde_json::from_value(v.clone()).unwrap();
    resp.items.iter().map(|i| (i.item_id, i.conditions.action.map(|a| a as u64))).collect()
}

async fn stats(client: &reqwest::Client, base: &str) -> StatsSnapshot {
    client.get(format!("{base}/stats")).send().await.unwrap().json().await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_and_counters() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let health: Value = client.get(format!("{}/healthz", server.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(health, json!({ "v": 1, "status": "ok" }));
    let fresh = stats(&client, &server.base).await;
    assert_eq!((fresh.requests, fresh.errors, fresh.total_steps, fresh.p50_ms, fresh.p90_ms), (0, 0, 0, 0.0, 0.0));

    let user = fixture().users(5)[0];
    let (status, _) = post(&client, &server.base, &request(user, GenerationMode::Uc, &[], 20, 1)).await;
    assert_eq!(status, 200);
    let one = stats(&client, &server.base).await;
    assert_eq!(one.requests, 1);
    assert_eq!(one.steps.get(&1), Some(&1));
    assert!(one.p50_ms <= one.p90_ms);

    for seed in 0..6 {
        post(&client, &server.base, &request(user, GenerationMode::Uc, &[], 10 + seed as usize, seed)).await;
    }
    let many = stats(&client, &server.base).await;
    assert_eq!(many.requests, 7);
    assert!(many.p50_ms <= many.p90_ms);
    assert!(many.items_returned >= one.items_returned);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn seeded_requests_repeat_exactly() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let user = fixture().users(5)[1];
    let req = request(user, GenerationMode::Oc, &[(0, 0.5), (1, 0.3), (2, 0.2)], 50, 11);
    let (_, a) = post(&client, &server.base, &req).await;
    let (_, b) = post(&client, &server.base, &req).await;
    assert!(!items(&a).is_empty());
    assert_eq!(items(&a), items(&b));
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn single_action_budget_keeps_provenance() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    for &user in fixture().users(5).iter().take(5) {
        let (status, v) = post(&client, &server.base, &request(user, GenerationMode::Oc, &[(2, 1.0)], 30, 0)).await;
        assert_eq!(status, 200);
        let got = items(&v);
        assert_eq!(got.len(), 30);
        assert!(got.iter().all(|&(_, a)| a == Some(2)), "{got:?}");
    }
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn returned_items_follow_the_budget_split() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let mut checked = 0;
    for &user in fixture().users(5).iter().take(20) {
        let (_, v) = post(&client, &server.base, &request(user, GenerationMode::Oc, &[(0, 0.6), (1, 0.4)], 100, 5)).await;
        let resp: RetrieveResponse = serde_json::from_value(v.clone()).unwrap();
        let mut per_action: BTreeMap<Option<usize>, usize> = BTreeMap::new();
        for i in &resp.items {
            *per_action.entry(i.conditions.action).or_default() += 1;
        }
        assert!(resp.items.len() <= 100);
        if resp.shortfall {
            continue;
        }
        assert_eq!(resp.items.len(), 100);
        assert_eq!(per_action, BTreeMap::from([(Some(0), 60), (Some(1), 40)]), "user {user}");
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} requests without shortfall");
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_ones() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let users: Vec<u64> = fixture().users(5).into_iter().take(8).collect();
    let reqs: Vec<RetrieveRequest> = users
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let mode = [GenerationMode::Uc, GenerationMode::Oc][i % 2];
            let budgets: &[(usize, f64)] = if i % 2 == 0 { &[] } else { &[(0, 0.7), (3, 0.3)] };
            RetrieveRequest { num_steps: 1 + i % 3, ..request(u, mode, budgets, 40, i as u64) }
        })
        .collect();
    let mut serial = Vec::new();
    for r in &reqs {
        serial.push(items(&post(&client, &server.base, r).await.1));
    }
    let mut tasks = Vec::new();
    for round in 0..3 {
        for r in reqs.iter().rev().skip(round % 2) {
            let (client, base, r) = (client.clone(), server.base.clone(), r.clone());
            tasks.push(tokio::spawn(async move { (r.user_id, items(&post(&client, &base, &r).await.1)) }));
        }
    }
    for t in tasks {
        let (user, got) = t.await.unwrap();
        let i = users.iter().position(|&u| u == user).unwrap();
        assert_eq!(got, serial[i], "user {user}");
    }
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn malformed_requests_get_machine_readable_errors() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let user = fixture().users(5)[0];
    let cases = [
        (json!({ "user_id": user, "mode": "oc", "budgets": { "0": 0.6 } }), "invalid_request"),
        (json!({ "user_id": user, "mode": "uc", "total_items": 100000 }), "invalid_request"),
        (json!({ "user_id": user, "mode": "uc", "v": 2 }), "invalid_request"),
        (json!({ "user_id": user, "mode": "oc", "budgets": { "9": 1.0 } }), "invalid_request"),
        (json!({ "user_id": user, "mode": "uc", "context_item_id": 1 }), "invalid_request"),
        (json!({ "user_id": user, "mode": "sideways" }), "malformed_request"),
        (json!({ "user_id": user, "mode": "uc", "colour": "red" }), "malformed_request"),
        (json!({ "mode": "uc" }), "malformed_request"),
    ];
    for (body, code) in cases {
        let (status, v) = post(&client, &server.base, &body).await;
        assert_eq!(status, 400, "{body}");
        assert_eq!(v["error"]["code"], code, "{body}: {v}");
        assert!(v["error"]["reason"].as_str().is_some_and(|s| !s.is_empty()));
        assert_eq!(v["v"], 1);
    }
    let raw = client.post(format!("{}/retrieve", server.base)).body("{not json").send().await.unwrap();
    assert_eq!(raw.status().as_u16(), 400);
    let s = stats(&client, &server.base).await;
    assert_eq!((s.requests, s.errors), (9, 9));
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unknown_user_is_a_cold_start() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let (status, v) = post(&client, &server.base, &request(u64::MAX - 3, GenerationMode::Uc, &[], 10, 0)).await;
    assert_eq!(status, 200);
    assert_eq!(v["cold_start"], true);
    assert_eq!(v["items"], json!([]));

    // With a context pin the request still generates.
    let data = genret::pipeline::Dataset::load(&fixture().data).unwrap();
    let pin = data.catalog.pins().next().unwrap().item_id;
    let body = json!({ "user_id": u64::MAX - 3, "mode": "uc", "surface": 2, "context_item_id": pin, "total_items": 10 });
    let (status, v) = post(&client, &server.base, &body).await;
    assert_eq!(status, 200, "{v}");
    assert_eq!(v["cold_start"], false);
    assert_eq!(v["items"].as_array().unwrap().len(), 10);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn swapping_the_engine_keeps_serving() {
    let server = Server::start(fixture().engine()).await;
    let client = reqwest::Client::new();
    let user = fixture().users(5)[2];
    let req = request(user, GenerationMode::Uc, &[], 25, 4);
    let before = items(&post(&client, &server.base, &req).await.1);
    server.state.swap(fixture().engine());
    let after = items(&post(&client, &server.base, &req).await.1);
    assert_eq!(before, after);
    let r = client.post(format!("{}/reload", server.base)).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 409, "a server without a loader refuses reloads");
    server.stop().await;
}
