use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use meigm_client::{Client, ClientError};
use meigm_core::api::{ErrorKind, JobState, JobStatus, SuiteRequest};
use meigm_core::config::{Overrides, RunConfig};
use meigm_core::learner::Algo;
use meigm_core::metrics::MetricsRecord;
use meigm_core::ops::{action_label, DiagnoseRequest, EvalMode, EvalRequest, GradcheckRequest, TrainSummary};
use meigm_core::replaybook::{SuiteOptions, SuiteReport};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

/// Maximum-entropy value decomposition for cooperative multi-agent RL.
#[derive(Parser)]
#[command(name = "meigm", version)]
struct Cli {
    /// Service to talk to; by default an in-process service is started.
    #[arg(long, global = true, env = "MEIGM_SERVER")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config, metrics, checkpoint and summary.
    Train(TrainArgs),
    /// Roll out a trained checkpoint.
    Eval(EvalArgs),
    /// Alignment diagnostics for one checkpoint, or an improvement bound for two.
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of every network and loss.
    Gradcheck(GradcheckArgs),
    /// Run a named experiment suite.
    Suite(SuiteArgs),
    /// Run the HTTP service in the foreground.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["matrix", "gridworld"])]
    env: Option<String>,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    seed: Option<u64>,
    /// Environment steps to train for.
    #[arg(long)]
    steps: Option<u64>,
    /// Run directory.
    #[arg(long = "out", env = "MEIGM_OUT_DIR")]
    out: Option<String>,
    /// Parallel rollout workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Only print the final summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fail unless the checkpoint was trained on this environment.
    #[arg(long, value_parser = ["matrix", "gridworld"])]
    env: Option<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A later checkpoint of the same run, for the improvement bound.
    #[arg(long)]
    newer: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "states", default_value_t = 1000)]
    n_states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the report; defaults to `alignment_report.json` next to the checkpoint.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
}

#[derive(Args)]
struct SuiteArgs {
    /// table1, gridworld, ablation-opt, alpha-sweep or entropy-sweep.
    name: String,
    #[arg(long = "out", env = "MEIGM_OUT_DIR", default_value = "runs/suites")]
    out: String,
    /// Replace every group's seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8750")]
    bind: String,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Other(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.kind() {
            Some(ErrorKind::Numerical) => Failure::Numerical(e.to_string()),
            Some(ErrorKind::InvalidRequest) => Failure::Usage(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<meigm_core::Error> for Failure {
    fn from(e: meigm_core::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical error: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}

async fn run(cli: Cli) -> Outcome {
    if let Command::Serve(a) = &cli.command {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| Failure::Usage(format!("cannot bind {}: {e}", a.bind)))?;
        eprintln!("listening on http://{}", a.bind);
        return meigm_server::serve(listener).await.map_err(|e| Failure::Other(e.to_string()));
    }
    let client = match &cli.server {
        Some(url) => Client::new(url.clone()),
        None => {
            let (addr, _) = meigm_server::spawn_local()
                .await
                .map_err(|e| Failure::Other(format!("cannot start local service: {e}")))?;
            Client::new(format!("http://{addr}"))
        }
    };
    match cli.command {
        Command::Train(a) => train(&client, a).await,
        Command::Eval(a) => eval(&client, a).await,
        Command::Diagnose(a) => diagnose(&client, a).await,
        Command::Gradcheck(a) => gradcheck(&client, a).await,
        Command::Suite(a) => suite(&client, a).await,
        Command::Serve(_) => unreachable!(),
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(path, &Overrides::default())?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_record(r: &MetricsRecord) {
    println!(
        "step {:>8}  episodes {:>6}  return {}  success {}  loss_q {}  alpha {}  entropy {}",
        r.step,
        r.episodes,
        fmt_opt(r.return_mean),
        fmt_opt(r.success_rate),
        fmt_opt(r.loss_q),
        fmt_opt(r.alpha),
        fmt_opt(r.joint_entropy),
    );
}

fn job_failure(status: &JobStatus) -> Failure {
    match &status.error {
        Some(e) if e.kind == ErrorKind::Numerical => Failure::Numerical(e.message.clone()),
        Some(e) => Failure::Other(e.message.clone()),
        None => Failure::Other(format!("job {} ended as {:?}", status.id, status.state)),
    }
}

fn job_result<T: serde::de::DeserializeOwned>(status: JobStatus) -> Result<T, Failure> {
    if !matches!(status.state, JobState::Succeeded | JobState::Cancelled) {
        return Err(job_failure(&status));
    }
    let v = status.result.ok_or_else(|| Failure::Other("job finished without a result".into()))?;
    serde_json::from_value(v).map_err(|e| Failure::Other(e.to_string()))
}

async fn train(client: &Client, a: TrainArgs) -> Outcome {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let ov = Overrides {
        env: a.env,
        algo: a.algo,
        seed: a.seed,
        steps: a.steps,
        out_dir: a.out,
        workers: a.workers,
    };
    let cfg = RunConfig::resolve(&text, &ov)?;
    let id = client.submit_train(&cfg).await?;
    let quiet = a.quiet;
    let status = client
        .wait(id, Duration::from_millis(200), |r| {
            if !quiet {
                print_record(r)
            }
        })
        .await?;
    let s: TrainSummary = job_result(status)?;
    println!(
        "{} on {}: {} steps, {} episodes, {} updates",
        s.algo, s.env, s.env_steps, s.episodes, s.updates
    );
    println!(
        "greedy evaluation: mean return {:.4}, success rate {:.4}",
        s.final_eval.mean_return, s.final_eval.success_rate
    );
    if let Some(t) = &s.q_tot_table {
        println!("learned Q_tot:");
        print_table(t);
    }
    println!("run directory: {}", s.out_dir);
    Ok(())
}

fn print_table(t: &[Vec<f64>]) {
    print!("     ");
    for j in 0..t.first().map_or(0, Vec::len) {
        print!("{:>9}", action_label(j));
    }
    println!();
    for (i, row) in t.iter().enumerate() {
        print!("  {:<3}", action_label(i));
        for v in row {
            print!("{v:>9.3}");
        }
        println!();
    }
}

fn joint_label(key: &str, matrix: bool) -> String {
    if !matrix {
        return format!("({key})");
    }
    let parts: Vec<String> = key
        .split(',')
        .map(|a| a.parse::<usize>().map_or_else(|_| a.to_string(), action_label))
        .collect();
    format!("({})", parts.join(","))
}

async fn eval(client: &Client, a: EvalArgs) -> Outcome {
    let config = a.config.as_deref().map(read_config).transpose()?;
    let req = EvalRequest {
        checkpoint: a.checkpoint.to_string_lossy().into_owned(),
        config,
        env: a.env,
        episodes: a.episodes,
        mode: match a.mode {
            Mode::Greedy => EvalMode::Greedy,
            Mode::Sample => EvalMode::Sample,
        },
        seed: a.seed,
    };
    let out = client.eval(&req).await?;
    let r = &out.report;
    println!("{} on {}: {} episodes ({:?})", out.algo, out.env, r.episodes, req.mode);
    println!("mean return {:.4}", r.mean_return);
    println!("success rate {:.4}", r.success_rate);
    let matrix = out.env == "matrix";
    let mut freq: Vec<(&String, &f64)> = r.joint_action_freq.iter().collect();
    freq.sort_by(|x, y| y.1.total_cmp(x.1).then(x.0.cmp(y.0)));
    println!("joint action frequencies:");
    for (k, f) in freq.iter().take(if matrix { usize::MAX } else { 10 }) {
        println!("  {:<8} {f:.4}", joint_label(k, matrix));
    }
    if let Some(probs) = &out.policy_probs {
        println!("policy probabilities:");
        for (i, p) in probs.iter().enumerate() {
            let cells: Vec<String> = p.iter().enumerate().map(|(a, v)| format!("{}={v:.4}", action_label(a))).collect();
            println!("  agent {i}: {}", cells.join(" "));
        }
    }
    Ok(())
}

async fn diagnose(client: &Client, a: DiagnoseArgs) -> Outcome {
    let config = a.config.as_deref().map(read_config).transpose()?;
    let req = DiagnoseRequest {
        checkpoint: a.checkpoint.to_string_lossy().into_owned(),
        newer_checkpoint: a.newer.as_ref().map(|p| p.to_string_lossy().into_owned()),
        config,
        n_states: a.n_states,
        seed: a.seed,
    };
    let report = client.diagnose(&req).await?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Other(e.to_string()))?;
    let path = a
        .report
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("alignment_report.json"));
    std::fs::write(&path, &text).map_err(|e| Failure::Other(format!("cannot write {}: {e}", path.display())))?;
    println!("{text}");
    println!("report written to {}", path.display());
    Ok(())
}

async fn gradcheck(client: &Client, a: GradcheckArgs) -> Outcome {
    let out = client
        .gradcheck(&GradcheckRequest {
            seed: a.seed,
            tol: a.tol,
            step: a.step,
        })
        .await?;
    println!("{:<12} {:>12} {:>8}  result", "network", "max_rel_err", "params");
    for e in &out.entries {
        println!(
            "{:<12} {:>12.3e} {:>8}  {}",
            e.network,
            e.max_rel_err,
            e.n_checked,
            if e.pass { "pass" } else { "FAIL" }
        );
    }
    if out.pass {
        Ok(())
    } else {
        Err(Failure::Other(format!("gradient check failed at tolerance {}", a.tol)))
    }
}

async fn suite(client: &Client, a: SuiteArgs) -> Outcome {
    let req = SuiteRequest {
        name: a.name,
        options: SuiteOptions {
            out_dir: a.out,
            seeds: a.seeds,
            steps: a.steps,
            jobs: a.jobs,
        },
    };
    let id = client.submit_suite(&req).await?;
    let mut done = 0;
    let status = loop {
        let s = client.job(id).await?;
        if s.progress > done {
            done = s.progress;
            eprintln!("{} runs finished", done);
        }
        if s.state.is_finished() {
            break s;
        }
        tokio::time::sleep(Duration::from_millis(500)).await;
    };
    let report: SuiteReport = job_result(status)?;
    for r in &report.runs {
        let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        match &r.error {
            Some(e) => println!("run {} seed {}: error: {e}", r.group, r.seed),
            None => println!("run {} seed {}: {}", r.group, r.seed, metrics.join(" ")),
        }
    }
    for x in &report.assertions {
        println!("{} {}: {}", if x.pass { "PASS" } else { "FAIL" }, x.claim, x.observed);
    }
    println!(
        "suite {}: {}",
        report.suite,
        if report.pass { "all assertions hold" } else { "some assertions failed" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Other("suite assertions failed".into()))
    }
}
