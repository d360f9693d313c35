use std::time::Duration;

use meigm_client::{Client, ClientError};
use meigm_core::api::{ErrorKind, JobState, SuiteRequest};
use meigm_core::config::{Overrides, RunConfig};
use meigm_core::envs::EnvConfig;
use meigm_core::ops::{EvalMode, EvalRequest, GradcheckRequest};
use meigm_core::replaybook::SuiteOptions;

async fn client() -> Client {
    let (addr, _) = meigm_server::spawn_local().await.unwrap();
    Client::new(format!("http://{addr}/"))
}

#[tokio::test(flavor = "multi_thread")]
async fn train_wait_and_eval() {
    let c = client().await;
    assert_eq!(c.health().await.unwrap()["status"], "ok");
    let dir = tempfile::tempdir().unwrap();
    let ov = Overrides {
        steps: Some(200),
        out_dir: Some(dir.path().to_string_lossy().into_owned()),
        ..Default::default()
    };
    let mut cfg = RunConfig::resolve("[train]\nbatch_size = 4\nwarmup_episodes = 4\n", &ov).unwrap();
    cfg.log.interval = 20;
    let id = c.submit_train(&cfg).await.unwrap();
    let mut seen = Vec::new();
    let status = c.wait(id, Duration::from_millis(20), |r| seen.push(r.step)).await.unwrap();
    assert_eq!(status.state, JobState::Succeeded);
    assert_eq!(seen.len(), status.progress);
    assert!(seen.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*seen.last().unwrap(), 200);

    let out = c
        .eval(&EvalRequest {
            checkpoint: dir.path().join("checkpoint.bin").to_string_lossy().into_owned(),
            config: None,
            env: Some("matrix".into()),
            episodes: 4,
            mode: EvalMode::Greedy,
            seed: 0,
        })
        .await
        .unwrap();
    assert_eq!(out.env, "matrix");
    assert_eq!(out.report.joint_action_freq.values().sum::<f64>(), 1.0);
    assert_eq!(c.jobs().await.unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_carry_their_kind() {
    let c = client().await;
    let err = c.job(42).await.unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::NotFound));
    let err = c
        .submit_suite(&SuiteRequest {
            name: "bogus".into(),
            options: SuiteOptions::default(),
        })
        .await
        .unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::InvalidRequest));
    let dead = Client::new("http://127.0.0.1:9");
    assert!(matches!(dead.health().await.unwrap_err(), ClientError::Transport(_)));
}

#[tokio::test(flavor = "multi_thread")]
async fn gradcheck_and_sessions() {
    let c = client().await;
    let g = c.gradcheck(&GradcheckRequest::default()).await.unwrap();
    assert!(g.pass);
    let s = c.open_env(EnvConfig::by_name("gridworld").unwrap()).await.unwrap();
    let r = c.reset_env(s.id, 0).await.unwrap();
    assert_eq!(r.obs[0].len(), s.spec.obs_dim);
    let step = c.step_env(s.id, vec![3, 2]).await.unwrap();
    assert!(!step.done);
    assert_eq!(step.info["gate_open"], 1.0);
    let err = c.step_env(s.id, vec![7, 0]).await.unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::InvalidRequest));
    c.close_env(s.id).await.unwrap();
    assert_eq!(c.close_env(s.id).await.unwrap_err().kind(), Some(ErrorKind::NotFound));
}
