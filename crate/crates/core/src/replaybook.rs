//! Named experiment suites. A suite is a list of run groups (one config,
//! several seeds) plus claims about the per-run metrics that the runs are
//! expected to satisfy.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{LogConfig, RunConfig};
use crate::envs::EnvConfig;
use crate::learner::{Algo, ModelConfig, TrainConfig};
use crate::metrics::{parse_metrics, MetricsRecord};
use crate::ops::{cmd_train, TrainSummary, METRICS_FILE};
use crate::{Error, Result};

pub const SUITES: [&str; 5] = ["table1", "gridworld", "ablation-opt", "alpha-sweep", "entropy-sweep"];

pub const REPORT_FILE: &str = "suite_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Ge,
    Gt,
    Le,
    Lt,
    /// `|value - threshold| <= tol`
    Within(f64),
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Ge => value >= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Le => value <= threshold,
            Comparator::Lt => value < threshold,
            Comparator::Within(tol) => (value - threshold).abs() <= tol,
        }
    }

    fn symbol(self) -> String {
        match self {
            Comparator::Ge => ">=".into(),
            Comparator::Gt => ">".into(),
            Comparator::Le => "<=".into(),
            Comparator::Lt => "<".into(),
            Comparator::Within(t) => format!("within {t} of"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    /// At least `min_runs` runs of `group` have `metric cmp threshold`.
    Count {
        group: String,
        metric: String,
        cmp: Comparator,
        threshold: f64,
        min_runs: usize,
    },
    /// Mean of `metric` over `left` compared with the mean over `right`.
    Means {
        left: String,
        right: String,
        metric: String,
        cmp: Comparator,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    /// The result this assertion stands for.
    pub claim: String,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunGroup {
    pub group: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSuite {
    pub name: String,
    pub groups: Vec<RunGroup>,
    pub assertions: Vec<Assertion>,
}

/// Per-run metric names that assertions may refer to.
pub const RUN_METRICS: [&str; 8] = [
    "final_return",
    "final_success_rate",
    "train_return_last",
    "train_success_last",
    "q_tot_optimal",
    "q_gap_max",
    "delta_q_ratio",
    "metrics_records",
];

impl ExperimentSuite {
    pub fn validate(&self) -> Result<()> {
        let known = |g: &str| self.groups.iter().any(|r| r.group == g);
        for a in &self.assertions {
            let (groups, metric) = match &a.check {
                Check::Count { group, metric, .. } => (vec![group], metric),
                Check::Means { left, right, metric, .. } => (vec![left, right], metric),
            };
            if let Some(g) = groups.into_iter().find(|g| !known(g)) {
                return Err(Error::Config(format!("assertion '{}' names unknown group '{g}'", a.claim)));
            }
            if !RUN_METRICS.contains(&metric.as_str()) {
                return Err(Error::Config(format!("assertion '{}' uses unknown metric '{metric}'", a.claim)));
            }
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.groups.iter().map(|g| g.seeds.len()).sum()
    }
}

fn run_config(env: &str, algo: Algo, train: TrainConfig) -> RunConfig {
    RunConfig {
        env: EnvConfig::by_name(env).expect("built-in"),
        algo: ModelConfig::for_env(algo, env),
        train,
        log: LogConfig {
            interval: if env == "gridworld" { 2000 } else { 100 },
            out_dir: String::new(),
            checkpoint_every: 0,
        },
    }
}

/// Matrix-game training settings shared by every algorithm in `table1`.
pub fn matrix_recipe(algo: Algo, seed: u64) -> RunConfig {
    run_config(
        "matrix",
        algo,
        TrainConfig {
            seed,
            total_steps: 10_000,
            batch_size: 16,
            warmup_episodes: 1,
            ..Default::default()
        },
    )
}

/// Gridworld training settings sized for one desktop core.
pub fn gridworld_recipe(algo: Algo, seed: u64) -> RunConfig {
    let mut cfg = run_config(
        "gridworld",
        algo,
        TrainConfig {
            seed,
            total_steps: 200_000,
            batch_size: 32,
            warmup_episodes: 32,
            eval_episodes: 20,
            ..Default::default()
        },
    );
    cfg.algo.hidden_dims = vec![64];
    cfg
}

/// QMIX with the exploration schedule stretched over the whole budget.
pub fn extended_epsilon(mut cfg: RunConfig) -> RunConfig {
    cfg.train.epsilon.anneal_steps = cfg.train.total_steps;
    cfg
}

fn group(name: &str, config: RunConfig, seeds: &[u64]) -> RunGroup {
    RunGroup {
        group: name.into(),
        config,
        seeds: seeds.to_vec(),
    }
}

fn count(claim: &str, group: &str, metric: &str, cmp: Comparator, threshold: f64, min_runs: usize) -> Assertion {
    Assertion {
        claim: claim.into(),
        check: Check::Count {
            group: group.into(),
            metric: metric.into(),
            cmp,
            threshold,
            min_runs,
        },
    }
}

fn means(claim: &str, left: &str, right: &str, metric: &str) -> Assertion {
    Assertion {
        claim: claim.into(),
        check: Check::Means {
            left: left.into(),
            right: right.into(),
            metric: metric.into(),
            cmp: Comparator::Ge,
        },
    }
}

const MATRIX_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRID_SEEDS: [u64; 4] = [0, 1, 2, 3];

pub fn suite(name: &str) -> Result<ExperimentSuite> {
    let s = match name {
        "table1" => {
            let algos = [Algo::MeQmix, Algo::MeVdn, Algo::Qmix, Algo::MeQmixNoopt];
            ExperimentSuite {
                name: name.into(),
                groups: algos
                    .iter()
                    .map(|&a| group(a.name(), matrix_recipe(a, 0), &MATRIX_SEEDS))
                    .collect(),
                assertions: vec![
                    count("me-qmix greedy policy plays (A,A) for return 8", "me-qmix", "final_return", Comparator::Within(1e-9), 8.0, 4),
                    count("me-qmix learns Q_tot(A,A) close to 8", "me-qmix", "q_tot_optimal", Comparator::Within(1.5), 8.0, 4),
                    count("qmix settles in the zero-payoff block", "qmix", "final_return", Comparator::Within(1e-9), 0.0, 4),
                    count("qmix underestimates Q_tot(A,A)", "qmix", "q_tot_optimal", Comparator::Lt, 0.0, 4),
                    count("OPT-free policies show a positive Q-gap", "me-qmix-noopt", "q_gap_max", Comparator::Gt, 0.0, 3),
                    count("policy-fit error shrinks by two orders of magnitude", "me-qmix", "delta_q_ratio", Comparator::Lt, 0.01, 4),
                ],
            }
        }
        "gridworld" => ExperimentSuite {
            name: name.into(),
            groups: vec![
                group("me-qmix", gridworld_recipe(Algo::MeQmix, 0), &GRID_SEEDS),
                group("qmix", gridworld_recipe(Algo::Qmix, 0), &GRID_SEEDS),
                group("qmix-extended-epsilon", extended_epsilon(gridworld_recipe(Algo::Qmix, 0)), &GRID_SEEDS),
            ],
            assertions: vec![
                means("entropy-driven exploration beats epsilon-greedy", "me-qmix", "qmix", "final_success_rate"),
                means("longer epsilon annealing does not close the gap", "me-qmix", "qmix-extended-epsilon", "final_success_rate"),
            ],
        },
        "ablation-opt" => ExperimentSuite {
            name: name.into(),
            groups: vec![
                group("me-qmix", gridworld_recipe(Algo::MeQmix, 0), &GRID_SEEDS),
                group("me-qmix-mlp", gridworld_recipe(Algo::MeQmixMlp, 0), &GRID_SEEDS),
                group("me-qmix-noopt", gridworld_recipe(Algo::MeQmixNoopt, 0), &GRID_SEEDS),
            ],
            assertions: vec![
                means("OPT head beats an unconstrained MLP head", "me-qmix", "me-qmix-mlp", "final_success_rate"),
                means("OPT head is at least as good as no transformation", "me-qmix", "me-qmix-noopt", "final_success_rate"),
            ],
        },
        "alpha-sweep" => sweep(name, &[0.03, 0.3, 3.0], |c, v| c.train.alpha_lr = v, "alpha-lr"),
        "entropy-sweep" => sweep(name, &[0.12, 0.24, 0.48], |c, v| c.train.target_entropy = Some(v * 2.0), "target-entropy-per-agent"),
        _ => return Err(Error::UnknownSuite(name.into())),
    };
    s.validate()?;
    Ok(s)
}

fn sweep(name: &str, values: &[f64], set: impl Fn(&mut RunConfig, f64), label: &str) -> ExperimentSuite {
    let groups: Vec<RunGroup> = values
        .iter()
        .map(|&v| {
            let mut c = gridworld_recipe(Algo::MeQmix, 0);
            set(&mut c, v);
            group(&format!("{label}={v}"), c, &GRID_SEEDS)
        })
        .collect();
    let assertions = groups
        .iter()
        .map(|g| count("every setting emits a metrics stream", &g.group, "metrics_records", Comparator::Gt, 0.0, g.seeds.len()))
        .collect();
    ExperimentSuite {
        name: name.into(),
        groups,
        assertions,
    }
}

/// Per-run metrics derived from a run's summary and metrics stream.
pub fn run_metrics(summary: &TrainSummary, records: &[MetricsRecord]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("final_return".into(), summary.final_eval.mean_return);
    m.insert("final_success_rate".into(), summary.final_eval.success_rate);
    m.insert("metrics_records".into(), records.len() as f64);
    if let Some(t) = &summary.q_tot_table {
        m.insert("q_tot_optimal".into(), t[0][0]);
    }
    let gaps: Vec<f64> = records.iter().filter_map(|r| r.q_gap).collect();
    if !gaps.is_empty() {
        m.insert("q_gap_max".into(), gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let tenth = |xs: &[f64]| -> Option<(f64, f64)> {
        if xs.is_empty() {
            return None;
        }
        let k = (xs.len() / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&xs[..k]), mean(&xs[xs.len() - k..])))
    };
    let dq: Vec<f64> = records.iter().filter_map(|r| r.delta_q_mse).collect();
    if let Some((first, last)) = tenth(&dq) {
        if first > 0.0 {
            m.insert("delta_q_ratio".into(), last / first);
        }
    }
    let rets: Vec<f64> = records.iter().filter_map(|r| r.return_mean).collect();
    if let Some((_, last)) = tenth(&rets) {
        m.insert("train_return_last".into(), last);
    }
    let succ: Vec<f64> = records.iter().filter_map(|r| r.success_rate).collect();
    if let Some((_, last)) = tenth(&succ) {
        m.insert("train_success_last".into(), last);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub group: String,
    pub seed: u64,
    pub out_dir: String,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub claim: String,
    pub check: Check,
    pub observed: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub runs: Vec<RunOutcome>,
    pub assertions: Vec<AssertionOutcome>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub out_dir: String,
    /// Replaces every group's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Replaces every group's training budget.
    pub steps: Option<u64>,
    /// Runs executed concurrently.
    pub jobs: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            out_dir: "runs/suites".into(),
            seeds: None,
            steps: None,
            jobs: 1,
        }
    }
}

fn execute(cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let summary = cmd_train(cfg, None)?;
    let text = fs::read_to_string(Path::new(&cfg.log.out_dir).join(METRICS_FILE))?;
    Ok(run_metrics(&summary, &parse_metrics(&text)?))
}

/// Lays out every (group, seed) run with its own output directory.
pub fn plan(suite: &ExperimentSuite, opts: &SuiteOptions) -> Vec<(String, RunConfig)> {
    let root = PathBuf::from(&opts.out_dir).join(&suite.name);
    let mut runs = Vec::new();
    for g in &suite.groups {
        for &seed in opts.seeds.as_ref().unwrap_or(&g.seeds) {
            let mut c = g.config.clone();
            c.train.seed = seed;
            if let Some(s) = opts.steps {
                c.train.total_steps = s;
                if c.train.epsilon.anneal_steps > s && g.config.train.epsilon.anneal_steps == g.config.train.total_steps {
                    c.train.epsilon.anneal_steps = s;
                }
            }
            c.log.out_dir = root.join(&g.group).join(format!("seed{seed}")).to_string_lossy().into_owned();
            runs.push((g.group.clone(), c));
        }
    }
    runs
}

/// Runs a suite, evaluates its assertions and writes `suite_report.json`.
/// A failing run is recorded and the remaining runs still execute.
pub fn run_suite(suite: &ExperimentSuite, opts: &SuiteOptions, progress: &mut dyn FnMut(&RunOutcome)) -> Result<SuiteReport> {
    suite.validate()?;
    let planned = plan(suite, opts);
    let mut runs = Vec::with_capacity(planned.len());
    for chunk in planned.chunks(opts.jobs.max(1)) {
        let results: Vec<Result<BTreeMap<String, f64>>> = std::thread::scope(|sc| {
            let handles: Vec<_> = chunk.iter().map(|(_, c)| sc.spawn(move || execute(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("run panicked".into()))))
                .collect()
        });
        for ((g, c), r) in chunk.iter().zip(results) {
            let outcome = RunOutcome {
                group: g.clone(),
                seed: c.train.seed,
                out_dir: c.log.out_dir.clone(),
                error: r.as_ref().err().map(|e| e.to_string()),
                metrics: r.unwrap_or_default(),
            };
            progress(&outcome);
            runs.push(outcome);
        }
    }
    let assertions: Vec<AssertionOutcome> = suite.assertions.iter().map(|a| evaluate_assertion(a, &runs)).collect();
    let report = SuiteReport {
        suite: suite.name.clone(),
        pass: assertions.iter().all(|a| a.pass),
        runs,
        assertions,
    };
    let dir = PathBuf::from(&opts.out_dir).join(&suite.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn group_values<'a>(runs: &'a [RunOutcome], group: &'a str, metric: &'a str) -> impl Iterator<Item = f64> + 'a {
    runs.iter()
        .filter(move |r| r.group == group)
        .filter_map(move |r| r.metrics.get(metric).copied())
}

pub fn evaluate_assertion(a: &Assertion, runs: &[RunOutcome]) -> AssertionOutcome {
    let (observed, pass) = match &a.check {
        Check::Count {
            group,
            metric,
            cmp,
            threshold,
            min_runs,
        } => {
            let total = runs.iter().filter(|r| &r.group == group).count();
            let hits = group_values(runs, group, metric).filter(|&v| cmp.holds(v, *threshold)).count();
            (
                format!("{hits}/{total} runs with {metric} {} {threshold}", cmp.symbol()),
                hits >= *min_runs,
            )
        }
        Check::Means { left, right, metric, cmp } => {
            let mean = |g: &str| {
                let v: Vec<f64> = group_values(runs, g, metric).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            match (mean(left), mean(right)) {
                (Some(l), Some(r)) => (
                    format!("mean {metric}: {left} {l:.4} {} {right} {r:.4}", cmp.symbol()),
                    cmp.holds(l, r),
                ),
                _ => (format!("no {metric} values for {left} or {right}"), false),
            }
        }
    };
    AssertionOutcome {
        claim: a.claim.clone(),
        check: a.check.clone(),
        observed,
        pass,
    }
}
