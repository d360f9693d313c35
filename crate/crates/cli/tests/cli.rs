use std::path::Path;
use std::process::{Command, Output};

fn meigm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meigm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MEIGM_SERVER")
        .env_remove("MEIGM_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "[train]\nbatch_size = 8\nwarmup_episodes = 8\n[log]\ninterval = 50\n";

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = meigm(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gradcheck"));
    assert_eq!(meigm(&["train", "--algo", "bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(meigm(&["train", "--env", "atari"], dir.path()).status.code(), Some(1));
    assert_eq!(meigm(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(meigm(&["train", "--config", "missing.toml"], dir.path()).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 3\n").unwrap();
    assert_eq!(meigm(&["train", "--config", "bad.toml"], dir.path()).status.code(), Some(1));
}

#[test]
fn train_is_reproducible_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = meigm(&["train", "--config", "run.toml", "--steps", "300", "--seed", "3", "--out", out, "--quiet"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("learned Q_tot"));
    }
    for f in ["metrics.jsonl", "checkpoint.bin", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        if f == "config.toml" {
            assert_ne!(a, b, "out_dir differs");
        } else {
            assert_eq!(a, b, "{f} differs");
        }
    }
    // the snapshot alone reproduces the run
    let o = meigm(&["train", "--config", "a/config.toml", "--out", "c", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap(),
        std::fs::read(dir.path().join("c/metrics.jsonl")).unwrap()
    );

    let o = meigm(&["eval", "--checkpoint", "a/checkpoint.bin", "--episodes", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("mean return"));
    assert!(text.contains("joint action frequencies"));
    assert!(text.contains("1.0000"));
    let o = meigm(&["eval", "--checkpoint", "a/checkpoint.bin", "--env", "gridworld"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = meigm(&["diagnose", "--checkpoint", "a/checkpoint.bin", "--newer", "a/checkpoint.bin", "--states", "20"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/alignment_report.json")).unwrap()).unwrap();
    assert_eq!(report["q_gap_max"], 0.0);
    assert_eq!(report["epsilon_bound"], 0.0);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_meigm"))
        .args(["train", "--steps", "50", "--quiet"])
        .current_dir(dir.path())
        .env_remove("MEIGM_SERVER")
        .env("MEIGM_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("from-env/summary.json").exists());
}

#[test]
fn numerical_abort_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("hot.toml"), "[train]\nlr = 1e300\nbatch_size = 4\nwarmup_episodes = 4\ngrad_clip = 0.0\n").unwrap();
    let o = meigm(&["train", "--config", "hot.toml", "--steps", "200", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = meigm(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for net in ["agent", "mixer", "opt", "loss_theta", "loss_phi", "loss_omega"] {
        assert!(text.contains(net));
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(meigm(&["suite", "nope"], dir.path()).status.code(), Some(1));
}
