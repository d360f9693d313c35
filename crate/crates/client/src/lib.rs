//! Thin async client for the meigm HTTP service.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use meigm_core::api::{
    Catalog, ErrorBody, ErrorKind, JobHandle, JobId, JobStatus, ResetRequest, ResetResponse, SessionInfo, SessionRequest,
    StepRequest, SuiteRequest,
};
use meigm_core::config::RunConfig;
use meigm_core::diagnostics::AlignmentReport;
use meigm_core::envs::{EnvConfig, StepResult};
use meigm_core::metrics::MetricsRecord;
use meigm_core::ops::{DiagnoseRequest, EvalOutput, EvalRequest, GradcheckOutput, GradcheckRequest};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("{}", .0.message)]
    Api(ErrorBody),

    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },

    #[error("cannot reach service: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api(b) => Some(b.kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8750`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let body = resp.text().await?;
        Err(match serde_json::from_str::<ErrorBody>(&body) {
            Ok(e) => ClientError::Api(e),
            Err(_) => ClientError::Status {
                status: status.as_u16(),
                body,
            },
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.http.get(self.url(path)).send().await?).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::decode(self.http.post(self.url(path)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<serde_json::Value> {
        self.get("/health").await
    }

    pub async fn catalog(&self) -> Result<Catalog> {
        self.get("/v1/catalog").await
    }

    pub async fn submit_train(&self, cfg: &RunConfig) -> Result<JobId> {
        Ok(self.post::<_, JobHandle>("/v1/train", cfg).await?.id)
    }

    pub async fn submit_suite(&self, req: &SuiteRequest) -> Result<JobId> {
        Ok(self.post::<_, JobHandle>("/v1/suites", req).await?.id)
    }

    pub async fn jobs(&self) -> Result<Vec<JobStatus>> {
        self.get("/v1/jobs").await
    }

    pub async fn job(&self, id: JobId) -> Result<JobStatus> {
        self.get(&format!("/v1/jobs/{id}")).await
    }

    pub async fn metrics(&self, id: JobId, since: usize) -> Result<Vec<MetricsRecord>> {
        self.get(&format!("/v1/jobs/{id}/metrics?since={since}")).await
    }

    pub async fn cancel(&self, id: JobId) -> Result<JobStatus> {
        self.post(&format!("/v1/jobs/{id}/cancel"), &()).await
    }

    /// Polls until the job finishes, handing each new metrics record to `on_record`.
    pub async fn wait(&self, id: JobId, poll: Duration, mut on_record: impl FnMut(&MetricsRecord)) -> Result<JobStatus> {
        let mut seen = 0;
        loop {
            let status = self.job(id).await?;
            let fresh = self.metrics(id, seen).await?;
            seen += fresh.len();
            fresh.iter().for_each(&mut on_record);
            if status.state.is_finished() {
                return Ok(status);
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalOutput> {
        self.post("/v1/eval", req).await
    }

    pub async fn diagnose(&self, req: &DiagnoseRequest) -> Result<AlignmentReport> {
        self.post("/v1/diagnose", req).await
    }

    pub async fn gradcheck(&self, req: &GradcheckRequest) -> Result<GradcheckOutput> {
        self.post("/v1/gradcheck", req).await
    }

    pub async fn open_env(&self, env: EnvConfig) -> Result<SessionInfo> {
        self.post("/v1/envs", &SessionRequest { env }).await
    }

    pub async fn reset_env(&self, id: u64, seed: u64) -> Result<ResetResponse> {
        self.post(&format!("/v1/envs/{id}/reset"), &ResetRequest { seed }).await
    }

    pub async fn step_env(&self, id: u64, actions: Vec<usize>) -> Result<StepResult> {
        self.post(&format!("/v1/envs/{id}/step"), &StepRequest { actions }).await
    }

    pub async fn close_env(&self, id: u64) -> Result<()> {
        let resp = self.http.delete(self.url(&format!("/v1/envs/{id}"))).send().await?;
        if resp.status().is_success() {
            return Ok(());
        }
        Self::decode::<serde_json::Value>(resp).await.map(|_| ())
    }
}
