//! Operator-facing commands: train, eval, diagnose and gradcheck. Each takes
//! a request value and produces a serializable report; the HTTP service and
//! the CLI are thin layers over these functions.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diagnostics::{alignment_report, AlignmentReport};
use crate::diffmath::{grad_check, load_checkpoint, save_checkpoint, Differentiable, GradCheckReport, ParamStore};
use crate::envs::EnvConfig;
use crate::learner::{
    evaluate, run_episode, train, ActMode, Algo, Batch, EvalReport, Learner, Model, ModelConfig, Params, PhiLoss, ThetaLoss,
    TrainConfig, TrainObserver,
};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::policy::temperature_loss;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env: String,
    pub algo: Algo,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub final_eval: EvalReport,
    /// Matrix game only: learned `Q_tot[a0][a1]`.
    pub q_tot_table: Option<Vec<Vec<f64>>>,
    pub out_dir: String,
}

struct FileObserver<'a> {
    writer: MetricsWriter<BufWriter<File>>,
    ckpt: PathBuf,
    forward: Option<&'a mut dyn TrainObserver>,
}

impl TrainObserver for FileObserver<'_> {
    fn on_metrics(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.writer.write(rec)?;
        if let Some(f) = self.forward.as_mut() {
            f.on_metrics(rec)?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, env_steps: u64, params: &Params) -> Result<()> {
        save_checkpoint(&params.to_checkpoint(), &self.ckpt)?;
        if let Some(f) = self.forward.as_mut() {
            f.on_checkpoint(env_steps, params)?;
        }
        Ok(())
    }

    fn cancelled(&self) -> bool {
        self.forward.as_ref().is_some_and(|f| f.cancelled())
    }
}

/// Trains and writes `config.toml`, `metrics.jsonl`, `checkpoint.bin` and
/// `summary.json` into `cfg.log.out_dir`. `observer` (if any) sees the same
/// records and checkpoints as the files.
pub fn cmd_train(cfg: &RunConfig, observer: Option<&mut dyn TrainObserver>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.log.out_dir);
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut obs = FileObserver {
        writer: MetricsWriter::new(BufWriter::new(File::create(out.join(METRICS_FILE))?)),
        ckpt: out.join(CHECKPOINT_FILE),
        forward: observer,
    };
    let every = (cfg.log.checkpoint_every > 0).then_some(cfg.log.checkpoint_every);
    let outcome = train(&cfg.env, &cfg.algo, &cfg.train, cfg.log.interval, every, &mut obs)?;
    let summary = TrainSummary {
        env: cfg.env.name().to_string(),
        algo: cfg.algo.variant,
        seed: cfg.train.seed,
        env_steps: outcome.env_steps,
        episodes: outcome.episodes,
        updates: outcome.learner.updates,
        final_eval: outcome.final_eval,
        q_tot_table: outcome.q_tot_table,
        out_dir: cfg.log.out_dir.clone(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Loads a checkpoint together with the run configuration that produced it.
/// Without an explicit config, `config.toml` next to the checkpoint is used.
pub fn load_run(checkpoint: &Path, config: Option<&RunConfig>) -> Result<(RunConfig, Model, Params)> {
    let cfg = match config {
        Some(c) => c.clone(),
        None => {
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            RunConfig::load(&dir.join(CONFIG_FILE), &Default::default())?
        }
    };
    let env = cfg.env.build()?;
    let model = Model::new(&cfg.algo, env.spec())?;
    let mut params = model.init_params(&cfg.train)?;
    let store = load_checkpoint(checkpoint)?;
    params.load_checkpoint(&store)?;
    Ok((cfg, model, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub checkpoint: String,
    #[serde(default)]
    pub config: Option<RunConfig>,
    /// Expected environment name; rejects checkpoints trained elsewhere.
    #[serde(default)]
    pub env: Option<String>,
    pub episodes: usize,
    pub mode: EvalMode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub env: String,
    pub algo: Algo,
    pub report: EvalReport,
    /// Per-agent action probabilities at the first step (sample mode on a
    /// single-state game), for comparing against the empirical frequencies.
    pub policy_probs: Option<Vec<Vec<f64>>>,
}

/// Letter names for matrix-game actions.
pub fn action_label(a: usize) -> String {
    char::from_u32('A' as u32 + a as u32).map_or_else(|| a.to_string(), |c| c.to_string())
}

pub fn cmd_eval(req: &EvalRequest) -> Result<EvalOutput> {
    let (cfg, model, params) = load_run(Path::new(&req.checkpoint), req.config.as_ref())?;
    if let Some(env) = &req.env {
        if env != cfg.env.name() {
            return Err(Error::Config(format!(
                "checkpoint was trained on {}, not {env}",
                cfg.env.name()
            )));
        }
    }
    let mode = match req.mode {
        EvalMode::Greedy => ActMode::Greedy,
        EvalMode::Sample => ActMode::Stochastic {
            epsilon: cfg.train.epsilon.finish,
        },
    };
    let report = evaluate(&model, &params, &cfg.env, mode, req.episodes, req.seed)?;
    let policy_probs = if req.mode == EvalMode::Sample && model.algo().max_entropy() && model.spec.episode_limit == 1 {
        let mut env = cfg.env.build()?;
        let (state, obs) = env.reset(0);
        let windows: Vec<Vec<f64>> = obs
            .iter()
            .map(|o| {
                let mut w = vec![0.0; (model.cfg.obs_window - 1) * o.len()];
                w.extend_from_slice(o);
                w
            })
            .collect();
        let q = model.agent.infer(&params.theta, model.step_inputs(&windows)?.view());
        Some(model.policies(&params, q.view(), &state).into_iter().map(|p| p.probs).collect())
    } else {
        None
    };
    Ok(EvalOutput {
        env: cfg.env.name().into(),
        algo: cfg.algo.variant,
        report,
        policy_probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRequest {
    pub checkpoint: String,
    /// A later checkpoint of the same run; enables the improvement bound.
    #[serde(default)]
    pub newer_checkpoint: Option<String>,
    #[serde(default)]
    pub config: Option<RunConfig>,
    pub n_states: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Steps visited by stochastic rollouts of `params`, at least `n_states` of them.
pub fn sample_states(cfg: &RunConfig, model: &Model, params: &Params, n_states: usize, seed: u64) -> Result<Batch> {
    let mut env = cfg.env.build()?;
    let mut rng = stream(seed, Stream::Diagnostics);
    let mode = ActMode::Stochastic {
        epsilon: cfg.train.epsilon.finish,
    };
    let mut eps = Vec::new();
    let mut total = 0;
    while total < n_states.max(1) {
        let reset = rng.gen();
        let ep = run_episode(model, params, env.as_mut(), &mut rng, mode, reset)?;
        total += ep.len();
        eps.push(ep);
    }
    let refs: Vec<_> = eps.iter().collect();
    Batch::from_episodes(model, &refs)
}

pub fn cmd_diagnose(req: &DiagnoseRequest) -> Result<AlignmentReport> {
    let (cfg, model, params) = load_run(Path::new(&req.checkpoint), req.config.as_ref())?;
    let newer = match &req.newer_checkpoint {
        Some(p) => Some(load_run(Path::new(p), Some(&cfg))?.2),
        None => None,
    };
    let batch = sample_states(&cfg, &model, &params, req.n_states, req.seed)?;
    alignment_report(&model, &params, &batch, req.n_states, newer.as_ref(), cfg.train.gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRequest {
    #[serde(default)]
    pub seed: u64,
    pub tol: f64,
    pub step: f64,
}

impl Default for GradcheckRequest {
    fn default() -> Self {
        GradcheckRequest {
            seed: 0,
            tol: 1e-4,
            step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub network: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutput {
    pub entries: Vec<GradcheckEntry>,
    pub pass: bool,
}

/// Weighted sum of the agent network's outputs.
struct AgentProbe<'a> {
    model: &'a Model,
    x: Array2<f64>,
    coef: Array2<f64>,
}

impl Differentiable for AgentProbe<'_> {
    fn loss(&self, s: &ParamStore) -> f64 {
        (self.model.agent.infer(s, self.x.view()) * &self.coef).sum()
    }

    fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
        let (y, c) = self.model.agent.forward(s, self.x.view());
        self.model.agent.backward(s, &c, self.coef.view());
        (y * &self.coef).sum()
    }
}

/// Weighted sum of `Q_tot` over random per-agent values and states.
struct MixerProbe<'a> {
    model: &'a Model,
    qs: Array2<f64>,
    states: Array2<f64>,
    coef: Vec<f64>,
}

impl Differentiable for MixerProbe<'_> {
    fn loss(&self, s: &ParamStore) -> f64 {
        let y = self.model.mixer.infer(s, self.qs.view(), self.states.view());
        y.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }

    fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
        let (y, c) = self.model.mixer.forward(s, self.qs.view(), self.states.view());
        self.model.mixer.backward(s, &c, &self.coef);
        y.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }
}

/// Weighted sum of every agent's policy-head logits.
struct HeadProbe<'a> {
    model: &'a Model,
    q: Array2<f64>,
    states: Array2<f64>,
    coef: Array2<f64>,
}

impl Differentiable for HeadProbe<'_> {
    fn loss(&self, s: &ParamStore) -> f64 {
        let head = self.model.head.as_ref().expect("head");
        (0..self.model.n_agents())
            .map(|i| (head.logits(s, i, self.q.view(), self.states.view()) * &self.coef).sum())
            .sum()
    }

    fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
        let head = self.model.head.as_ref().expect("head");
        let mut total = 0.0;
        for i in 0..self.model.n_agents() {
            let (y, c) = head.forward(s, i, self.q.view(), self.states.view());
            head.backward(s, i, &c, self.coef.view());
            total += (y * &self.coef).sum();
        }
        total
    }
}

/// L(ω) over `log_alpha` for fixed expected log-probabilities.
struct TemperatureProbe {
    log_pi: Vec<f64>,
    target: f64,
}

impl Differentiable for TemperatureProbe {
    fn loss(&self, s: &ParamStore) -> f64 {
        temperature_loss(s.values(crate::policy::LOG_ALPHA)[0], &self.log_pi, self.target).0
    }

    fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
        let (l, g) = temperature_loss(s.values(crate::policy::LOG_ALPHA)[0], &self.log_pi, self.target);
        s.accumulate_grad(crate::policy::LOG_ALPHA, [g].iter());
        l
    }
}

fn entry(network: &str, r: GradCheckReport) -> GradcheckEntry {
    GradcheckEntry {
        network: network.into(),
        max_rel_err: r.max_rel_err,
        worst_param: r.worst_param,
        n_checked: r.n_checked,
        pass: r.pass,
    }
}

/// Small gridworld model used for gradient checks.
fn gradcheck_model(algo: Algo) -> Result<(EnvConfig, Model)> {
    let env_cfg = EnvConfig::by_name("gridworld").expect("built-in");
    let env = env_cfg.build()?;
    let mut mc = ModelConfig::for_env(algo, "gridworld");
    mc.obs_window = 2;
    mc.hidden_dims = vec![6];
    mc.mixing_embed_dim = 4;
    mc.hypernet_embed_dim = 5;
    mc.opt_d1 = 3;
    mc.opt_embed_dim = 4;
    Ok((env_cfg, Model::new(&mc, env.spec())?))
}

/// Finite-difference checks of the agent network, mixer, OPT and the three losses.
pub fn cmd_gradcheck(req: &GradcheckRequest) -> Result<GradcheckOutput> {
    let mut entries = Vec::new();
    let mut rng = stream(req.seed, Stream::Diagnostics);
    let (env_cfg, model) = gradcheck_model(Algo::MeQmix)?;
    let tc = TrainConfig {
        seed: req.seed,
        ..Default::default()
    };
    let mut learner = Learner::new(model.clone(), tc)?;
    // a few short random episodes for the loss checks
    let mut env = env_cfg.build()?;
    let mut eps = Vec::new();
    for _ in 0..2 {
        let reset = rng.gen();
        let mut ep = run_episode(&model, &learner.params, env.as_mut(), &mut rng, ActMode::Stochastic { epsilon: 1.0 }, reset)?;
        let keep = ep.len().min(4);
        ep.obs.truncate(keep);
        ep.states.truncate(keep);
        ep.actions.truncate(keep);
        ep.rewards.truncate(keep);
        ep.log_pi.truncate(keep);
        ep.dones.truncate(keep);
        eps.push(ep);
    }
    let refs: Vec<_> = eps.iter().collect();
    let batch = Batch::from_episodes(&model, &refs)?;
    let rows = batch.inputs.nrows();
    let na = model.n_actions();
    let n = model.n_agents();
    let mut rand_mat = |r: usize, c: usize, lo: f64, hi: f64| Array2::from_shape_fn((r, c), |_| rng.gen_range(lo..hi));

    let agent = AgentProbe {
        model: &model,
        x: batch.inputs.clone(),
        coef: rand_mat(rows, na, -1.0, 1.0),
    };
    entries.push(entry("agent", grad_check(&agent, &mut learner.params.theta, req.step, req.tol)?));

    let mixer = MixerProbe {
        model: &model,
        qs: rand_mat(batch.len(), n, -2.0, 2.0),
        states: batch.states.clone(),
        coef: rand_mat(1, batch.len(), -1.0, 1.0).into_raw_vec_and_offset().0,
    };
    entries.push(entry("mixer", grad_check(&mixer, &mut learner.params.theta, req.step, req.tol)?));

    let head = HeadProbe {
        model: &model,
        q: rand_mat(batch.len(), na, -2.0, 2.0),
        states: batch.states.clone(),
        coef: rand_mat(batch.len(), na, -1.0, 1.0),
    };
    entries.push(entry("opt", grad_check(&head, &mut learner.params.phi, req.step, req.tol)?));

    let targets = learner.targets(&batch);
    let theta_loss = ThetaLoss {
        model: &model,
        batch: &batch,
        targets: &targets,
    };
    entries.push(entry("loss_theta", grad_check(&theta_loss, &mut learner.params.theta, req.step, req.tol)?));

    let (q_all, q_tot) = crate::learner::theta_forward(&model, &learner.params.theta, &batch);
    let q_tot = q_tot.to_vec();
    let phi_loss = PhiLoss {
        model: &model,
        batch: &batch,
        q_all: &q_all,
        q_tot: &q_tot,
    };
    entries.push(entry("loss_phi", grad_check(&phi_loss, &mut learner.params.phi, req.step, req.tol)?));

    let omega = TemperatureProbe {
        log_pi: rand_mat(1, batch.len(), -3.0, 0.0).into_raw_vec_and_offset().0,
        target: learner.params.temp.target_entropy,
    };
    entries.push(entry("loss_omega", grad_check(&omega, learner.params.temp.params_mut(), req.step, req.tol)?));

    // the unconstrained head used by the ablation
    let (_, mlp_model) = gradcheck_model(Algo::MeQmixMlp)?;
    let mut mlp_params = mlp_model.init_params(&TrainConfig {
        seed: req.seed,
        ..Default::default()
    })?;
    let mlp_head = HeadProbe {
        model: &mlp_model,
        q: head.q.clone(),
        states: batch.states.clone(),
        coef: head.coef.clone(),
    };
    entries.push(entry("mlp_head", grad_check(&mlp_head, &mut mlp_params.phi, req.step, req.tol)?));

    let pass = entries.iter().all(|e| e.pass);
    Ok(GradcheckOutput { entries, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes() {
        let out = cmd_gradcheck(&GradcheckRequest::default()).unwrap();
        assert!(out.pass, "{out:#?}");
        let names: Vec<&str> = out.entries.iter().map(|e| e.network.as_str()).collect();
        for n in ["agent", "mixer", "opt", "loss_theta", "loss_phi", "loss_omega"] {
            assert!(names.contains(&n));
        }
    }

    /// Wraps a correct network and corrupts its analytic gradient.
    struct SignBug<'a>(AgentProbe<'a>);

    impl Differentiable for SignBug<'_> {
        fn loss(&self, s: &ParamStore) -> f64 {
            self.0.loss(s)
        }

        fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
            let l = self.0.loss_and_grad(s);
            for (_, p) in s.iter_mut() {
                p.grad.iter_mut().for_each(|g| *g = -*g);
            }
            l
        }
    }

    #[test]
    fn injected_bug_is_caught() {
        let (_, model) = gradcheck_model(Algo::MeQmix).unwrap();
        let mut params = model.init_params(&TrainConfig::default()).unwrap();
        let x = Array2::from_shape_fn((3, model.agent.input_dim()), |(i, j)| ((i * 7 + j) % 5) as f64 * 0.2 - 0.4);
        let coef = Array2::from_shape_fn((3, model.n_actions()), |(i, j)| (i + j) as f64 * 0.1 + 0.1);
        let good = AgentProbe { model: &model, x: x.clone(), coef: coef.clone() };
        assert!(grad_check(&good, &mut params.theta, 1e-6, 1e-4).unwrap().pass);
        let bad = SignBug(AgentProbe { model: &model, x, coef });
        let r = grad_check(&bad, &mut params.theta, 1e-6, 1e-4).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn action_labels() {
        assert_eq!(action_label(0), "A");
        assert_eq!(action_label(2), "C");
    }
}
