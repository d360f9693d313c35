use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use meigm_core::api::{ErrorBody, ErrorKind, JobId, JobKind, JobState, JobStatus};
use meigm_core::config::RunConfig;
use meigm_core::learner::{Params, TrainObserver};
use meigm_core::metrics::MetricsRecord;
use meigm_core::ops::cmd_train;
use meigm_core::replaybook::{run_suite as run_experiments, ExperimentSuite, SuiteOptions};

struct Outcome {
    state: JobState,
    progress: usize,
    result: Option<serde_json::Value>,
    error: Option<ErrorBody>,
}

pub(crate) struct Job {
    pub id: JobId,
    pub kind: JobKind,
    outcome: Mutex<Outcome>,
    metrics: Mutex<Vec<MetricsRecord>>,
    cancel: AtomicBool,
}

impl Job {
    pub fn new(id: JobId, kind: JobKind) -> Self {
        Job {
            id,
            kind,
            outcome: Mutex::new(Outcome {
                state: JobState::Running,
                progress: 0,
                result: None,
                error: None,
            }),
            metrics: Mutex::default(),
            cancel: AtomicBool::new(false),
        }
    }

    pub fn status(&self) -> JobStatus {
        let o = self.outcome.lock().expect("job outcome");
        JobStatus {
            id: self.id,
            kind: self.kind,
            state: o.state,
            progress: o.progress,
            result: o.result.clone(),
            error: o.error.clone(),
        }
    }

    pub fn metrics_since(&self, since: usize) -> Vec<MetricsRecord> {
        let m = self.metrics.lock().expect("job metrics");
        m.get(since..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::Relaxed);
    }

    fn bump(&self) {
        self.outcome.lock().expect("job outcome").progress += 1;
    }

    /// Records the outcome; a panic in the job body marks it failed.
    fn finish<T: serde::Serialize>(&self, r: std::thread::Result<meigm_core::Result<T>>) {
        let r = match r {
            Ok(r) => r,
            Err(p) => {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "job panicked".into());
                let mut o = self.outcome.lock().expect("job outcome");
                o.state = JobState::Failed;
                o.error = Some(ErrorBody {
                    kind: ErrorKind::Internal,
                    message: msg,
                });
                return;
            }
        };
        let mut o = self.outcome.lock().expect("job outcome");
        match r.map(|v| serde_json::to_value(v)) {
            Ok(Ok(v)) => {
                o.state = if self.cancel.load(Ordering::Relaxed) {
                    JobState::Cancelled
                } else {
                    JobState::Succeeded
                };
                o.result = Some(v);
            }
            Ok(Err(e)) => {
                o.state = JobState::Failed;
                o.error = Some(ErrorBody::from(&meigm_core::Error::from(e)));
            }
            Err(e) => {
                o.state = JobState::Failed;
                o.error = Some(ErrorBody::from(&e));
            }
        }
    }
}

struct JobObserver<'a>(&'a Job);

impl TrainObserver for JobObserver<'_> {
    fn on_metrics(&mut self, rec: &MetricsRecord) -> meigm_core::Result<()> {
        self.0.metrics.lock().expect("job metrics").push(rec.clone());
        self.0.bump();
        Ok(())
    }

    fn on_checkpoint(&mut self, _env_steps: u64, _params: &Params) -> meigm_core::Result<()> {
        Ok(())
    }

    fn cancelled(&self) -> bool {
        self.0.cancel.load(Ordering::Relaxed)
    }
}

pub(crate) fn run_train(job: &Job, cfg: &RunConfig) {
    let mut obs = JobObserver(job);
    let r = catch_unwind(AssertUnwindSafe(|| cmd_train(cfg, Some(&mut obs))));
    job.finish(r);
}

pub(crate) fn run_suite(job: &Job, suite: &ExperimentSuite, opts: &SuiteOptions) {
    let r = catch_unwind(AssertUnwindSafe(|| run_experiments(suite, opts, &mut |_| job.bump())));
    job.finish(r);
}
