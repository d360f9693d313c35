use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use meigm_core::api::{ErrorBody, ErrorKind, JobState, JobStatus, SessionInfo};
use meigm_core::config::{Overrides, RunConfig};
use meigm_server::router;

fn app() -> Router {
    router(Arc::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

fn small_run(out: &str, steps: u64) -> RunConfig {
    let ov = Overrides {
        steps: Some(steps),
        out_dir: Some(out.into()),
        ..Default::default()
    };
    let mut c = RunConfig::resolve("[train]\nbatch_size = 8\nwarmup_episodes = 8\n", &ov).unwrap();
    c.log.interval = 50;
    c
}

async fn wait(app: &Router, id: u64) -> JobStatus {
    for _ in 0..600 {
        let (_, v) = call(app, "GET", &format!("/v1/jobs/{id}"), None).await;
        let s: JobStatus = serde_json::from_value(v).unwrap();
        if s.state.is_finished() {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn health_and_catalog() {
    let app = app();
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (_, v) = call(&app, "GET", "/v1/catalog", None).await;
    assert_eq!(v["algos"].as_array().unwrap().len(), 6);
    assert!(v["suites"].as_array().unwrap().contains(&json!("table1")));
}

#[tokio::test]
async fn train_job_lifecycle_then_eval_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").to_string_lossy().into_owned();
    let app = app();
    let (s, v) = call(&app, "POST", "/v1/train", Some(serde_json::to_value(small_run(&out, 300)).unwrap())).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["id"].as_u64().unwrap();
    let status = wait(&app, id).await;
    assert_eq!(status.state, JobState::Succeeded, "{status:?}");
    assert_eq!(status.result.as_ref().unwrap()["env_steps"], 300);

    let (_, all) = call(&app, "GET", &format!("/v1/jobs/{id}/metrics"), None).await;
    let (_, tail) = call(&app, "GET", &format!("/v1/jobs/{id}/metrics?since=2"), None).await;
    let all = all.as_array().unwrap();
    assert_eq!(all.len(), status.progress);
    assert_eq!(&all[2..], tail.as_array().unwrap().as_slice());

    let ckpt = format!("{out}/checkpoint.bin");
    let (s, v) = call(&app, "POST", "/v1/eval", Some(json!({"checkpoint": ckpt, "episodes": 3, "mode": "greedy"}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["report"]["episodes"], 3);
    assert_eq!(v["report"]["state_reads"], 0);

    let (s, v) = call(&app, "POST", "/v1/diagnose", Some(json!({"checkpoint": ckpt, "n_states": 20}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["q_gap_max"], 0.0);
    assert_eq!(v["igm_violation_rate"], 0.0);
}

#[tokio::test]
async fn cancelled_job_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let app = app();
    let (_, v) = call(&app, "POST", "/v1/train", Some(serde_json::to_value(small_run(&out, 1_000_000)).unwrap())).await;
    let id = v["id"].as_u64().unwrap();
    let (s, _) = call(&app, "POST", &format!("/v1/jobs/{id}/cancel"), None).await;
    assert_eq!(s, StatusCode::OK);
    let status = wait(&app, id).await;
    assert_eq!(status.state, JobState::Cancelled);
    assert!(status.result.unwrap()["env_steps"].as_u64().unwrap() < 1_000_000);
}

#[tokio::test]
async fn errors_use_the_error_body() {
    let app = app();
    let (s, v) = call(&app, "GET", "/v1/jobs/999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let e: ErrorBody = serde_json::from_value(v).unwrap();
    assert_eq!(e.kind, ErrorKind::NotFound);

    let mut bad = serde_json::to_value(small_run("/tmp/unused", 10)).unwrap();
    bad["train"]["gamma"] = json!(1.5);
    let (s, v) = call(&app, "POST", "/v1/train", Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["kind"], "invalid_request");

    let (s, v) = call(&app, "POST", "/v1/train", Some(json!({"nonsense": true}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["kind"], "invalid_request");

    let (s, v) = call(&app, "POST", "/v1/suites", Some(json!({"name": "nope"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["message"].as_str().unwrap().contains("nope"));

    let (s, _) = call(&app, "POST", "/v1/eval", Some(json!({"checkpoint": "/nonexistent/checkpoint.bin", "episodes": 1, "mode": "greedy"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn environment_sessions() {
    let app = app();
    let (s, v) = call(&app, "POST", "/v1/envs", Some(json!({"env": {"name": "matrix"}}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let info: SessionInfo = serde_json::from_value(v).unwrap();
    assert_eq!(info.spec.n_agents, 2);
    let (_, v) = call(&app, "POST", &format!("/v1/envs/{}/reset", info.id), Some(json!({"seed": 3}))).await;
    assert_eq!(v["obs"], json!([[1.0], [1.0]]));
    let (s, v) = call(&app, "POST", &format!("/v1/envs/{}/step", info.id), Some(json!({"actions": [0, 0]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["reward"], 8.0);
    assert_eq!(v["done"], true);
    let (s, _) = call(&app, "POST", &format!("/v1/envs/{}/step", info.id), Some(json!({"actions": [0, 0]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "DELETE", &format!("/v1/envs/{}", info.id), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, "POST", &format!("/v1/envs/{}/reset", info.id), Some(json!({}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
