//! HTTP/JSON front end for the `meigm-core` operations.
//!
//! Training runs and suites are long-running, so they are submitted as jobs and
//! polled; evaluation, diagnostics and gradient checks answer directly.
//! Environment sessions expose `reset`/`step` for external drivers.

mod error;
mod jobs;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use meigm_core::api::{
    Catalog, JobHandle, JobKind, JobStatus, ResetRequest, ResetResponse, SessionInfo, SessionRequest, StepRequest,
    SuiteRequest,
};
use meigm_core::config::RunConfig;
use meigm_core::diagnostics::AlignmentReport;
use meigm_core::envs::{Env, StepResult};
use meigm_core::learner::Algo;
use meigm_core::metrics::MetricsRecord;
use meigm_core::ops::{self, DiagnoseRequest, EvalOutput, EvalRequest, GradcheckOutput, GradcheckRequest};
use meigm_core::replaybook::{self, SUITES};

pub use error::{ApiError, ApiJson};
use jobs::Job;

#[derive(Default)]
pub struct AppState {
    next_id: AtomicU64,
    jobs: Mutex<HashMap<u64, Arc<Job>>>,
    sessions: Mutex<HashMap<u64, Box<dyn Env>>>,
}

impl AppState {
    fn fresh_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn job(&self, id: u64) -> Result<Arc<Job>, ApiError> {
        self.jobs
            .lock()
            .expect("job table")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no job {id}")))
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/catalog", get(catalog))
        .route("/v1/train", post(submit_train))
        .route("/v1/suites", post(submit_suite))
        .route("/v1/jobs", get(list_jobs))
        .route("/v1/jobs/{id}", get(job_status))
        .route("/v1/jobs/{id}/metrics", get(job_metrics))
        .route("/v1/jobs/{id}/cancel", post(cancel_job))
        .route("/v1/eval", post(eval))
        .route("/v1/diagnose", post(diagnose))
        .route("/v1/gradcheck", post(gradcheck))
        .route("/v1/envs", post(open_session))
        .route("/v1/envs/{id}", axum::routing::delete(close_session))
        .route("/v1/envs/{id}/reset", post(reset_session))
        .route("/v1/envs/{id}/step", post(step_session))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::default())).await
}

/// Starts a server on an ephemeral local port in the current runtime.
pub async fn spawn_local() -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    Ok((addr, tokio::spawn(serve(listener))))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> meigm_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn catalog() -> Json<Catalog> {
    Json(Catalog {
        algos: Algo::ALL.iter().map(|a| a.name().to_string()).collect(),
        envs: vec!["matrix".into(), "gridworld".into()],
        suites: SUITES.iter().map(|s| s.to_string()).collect(),
    })
}

async fn submit_train(State(st): State<Shared>, ApiJson(cfg): ApiJson<RunConfig>) -> Result<(StatusCode, Json<JobHandle>), ApiError> {
    cfg.validate()?;
    let id = st.fresh_id();
    let job = Arc::new(Job::new(id, JobKind::Train));
    st.jobs.lock().expect("job table").insert(id, job.clone());
    tokio::task::spawn_blocking(move || jobs::run_train(&job, &cfg));
    Ok((StatusCode::ACCEPTED, Json(JobHandle { id })))
}

async fn submit_suite(State(st): State<Shared>, ApiJson(req): ApiJson<SuiteRequest>) -> Result<(StatusCode, Json<JobHandle>), ApiError> {
    let suite = replaybook::suite(&req.name)?;
    let id = st.fresh_id();
    let job = Arc::new(Job::new(id, JobKind::Suite));
    st.jobs.lock().expect("job table").insert(id, job.clone());
    tokio::task::spawn_blocking(move || jobs::run_suite(&job, &suite, &req.options));
    Ok((StatusCode::ACCEPTED, Json(JobHandle { id })))
}

async fn list_jobs(State(st): State<Shared>) -> Json<Vec<JobStatus>> {
    let mut all: Vec<JobStatus> = st.jobs.lock().expect("job table").values().map(|j| j.status()).collect();
    all.sort_by_key(|s| s.id);
    Json(all)
}

async fn job_status(State(st): State<Shared>, Path(id): Path<u64>) -> Result<Json<JobStatus>, ApiError> {
    Ok(Json(st.job(id)?.status()))
}

#[derive(Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

async fn job_metrics(State(st): State<Shared>, Path(id): Path<u64>, Query(q): Query<Since>) -> Result<Json<Vec<MetricsRecord>>, ApiError> {
    Ok(Json(st.job(id)?.metrics_since(q.since)))
}

async fn cancel_job(State(st): State<Shared>, Path(id): Path<u64>) -> Result<Json<JobStatus>, ApiError> {
    let job = st.job(id)?;
    if job.kind != JobKind::Train {
        return Err(ApiError::invalid("only training jobs can be cancelled"));
    }
    job.cancel();
    Ok(Json(job.status()))
}

async fn eval(ApiJson(req): ApiJson<EvalRequest>) -> Result<Json<EvalOutput>, ApiError> {
    Ok(Json(blocking(move || ops::cmd_eval(&req)).await?))
}

async fn diagnose(ApiJson(req): ApiJson<DiagnoseRequest>) -> Result<Json<AlignmentReport>, ApiError> {
    Ok(Json(blocking(move || ops::cmd_diagnose(&req)).await?))
}

async fn gradcheck(ApiJson(req): ApiJson<GradcheckRequest>) -> Result<Json<GradcheckOutput>, ApiError> {
    Ok(Json(blocking(move || ops::cmd_gradcheck(&req)).await?))
}

async fn open_session(State(st): State<Shared>, ApiJson(req): ApiJson<SessionRequest>) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let env = req.env.build()?;
    let id = st.fresh_id();
    let spec = env.spec().clone();
    st.sessions.lock().expect("session table").insert(id, env);
    Ok((StatusCode::CREATED, Json(SessionInfo { id, spec })))
}

fn with_session<T>(st: &AppState, id: u64, f: impl FnOnce(&mut dyn Env) -> Result<T, ApiError>) -> Result<T, ApiError> {
    let mut sessions = st.sessions.lock().expect("session table");
    let env = sessions.get_mut(&id).ok_or_else(|| ApiError::not_found(format!("no environment session {id}")))?;
    f(env.as_mut())
}

async fn reset_session(State(st): State<Shared>, Path(id): Path<u64>, ApiJson(req): ApiJson<ResetRequest>) -> Result<Json<ResetResponse>, ApiError> {
    with_session(&st, id, |env| {
        let (state, obs) = env.reset(req.seed);
        Ok(Json(ResetResponse { state, obs }))
    })
}

async fn step_session(State(st): State<Shared>, Path(id): Path<u64>, ApiJson(req): ApiJson<StepRequest>) -> Result<Json<StepResult>, ApiError> {
    with_session(&st, id, |env| Ok(Json(env.step(&req.actions)?)))
}

async fn close_session(State(st): State<Shared>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    match st.sessions.lock().expect("session table").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("no environment session {id}"))),
    }
}
