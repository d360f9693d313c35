use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{run_episode, ActMode, Batch, Episode, Learner, Model, ModelConfig, Params, ReplayBuffer, TrainConfig};
use crate::agentnet::QVector;
use crate::envs::{Env, EnvConfig};
use crate::metrics::{IntervalStats, MetricsRecord};
use crate::policy::state_reads;
use crate::rng::{stream, Rng, Stream};
use crate::Result;

/// Hooks called by [`train`] as the run progresses.
pub trait TrainObserver {
    fn on_metrics(&mut self, _rec: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _env_steps: u64, _params: &Params) -> Result<()> {
        Ok(())
    }

    /// Polled between collection phases; returning true stops the run early.
    fn cancelled(&self) -> bool {
        false
    }
}

impl TrainObserver for () {}

impl TrainObserver for Vec<MetricsRecord> {
    fn on_metrics(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    /// Frequency of each first-step joint action, keyed `"a0,a1,..."`.
    pub joint_action_freq: BTreeMap<String, f64>,
    /// State-dependent forward passes performed while acting.
    pub state_reads: u64,
}

/// Rolls out `episodes` episodes. Greedy mode asserts that no state-dependent
/// network was evaluated.
pub fn evaluate(model: &Model, params: &Params, env_cfg: &EnvConfig, mode: ActMode, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut env = env_cfg.build()?;
    let mut rng = stream(seed, Stream::Diagnostics);
    let before = state_reads();
    let mut ret = 0.0;
    let mut succ = 0usize;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..episodes {
        let reset = rng.gen();
        let ep = run_episode(model, params, env.as_mut(), &mut rng, mode, reset)?;
        ret += ep.total_return();
        succ += usize::from(ep.success);
        let key: Vec<String> = ep.actions[0].iter().map(usize::to_string).collect();
        *counts.entry(key.join(",")).or_default() += 1;
    }
    let reads = state_reads() - before;
    if mode == ActMode::Greedy {
        assert_eq!(reads, 0, "greedy execution evaluated a state-dependent network");
    }
    let denom = episodes.max(1) as f64;
    Ok(EvalReport {
        mode: match mode {
            ActMode::Greedy => "greedy".into(),
            ActMode::Stochastic { .. } => "sample".into(),
        },
        episodes,
        mean_return: ret / denom,
        success_rate: succ as f64 / denom,
        joint_action_freq: counts.into_iter().map(|(k, c)| (k, c as f64 / denom)).collect(),
        state_reads: reads,
    })
}

/// `Q_tot` of every joint action at the initial state of a two-agent,
/// single-step game, `table[a0][a1]`.
pub fn q_tot_table(model: &Model, params: &Params, env: &mut dyn Env) -> Result<Option<Vec<Vec<f64>>>> {
    if model.n_agents() != 2 || model.spec.episode_limit != 1 {
        return Ok(None);
    }
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
    let qv: Vec<QVector> = (0..2).map(|i| QVector(q.row(i).to_vec())).collect();
    let (_, values) = model.mixer.joint_values(&params.theta, &qv, &state)?;
    let a = model.n_actions();
    Ok(Some(values.chunks(a).map(<[f64]>::to_vec).collect()))
}

pub struct TrainOutcome {
    pub learner: Learner,
    pub env_steps: u64,
    pub episodes: u64,
    pub final_eval: EvalReport,
    pub q_tot_table: Option<Vec<Vec<f64>>>,
    pub buffer: ReplayBuffer,
}

struct Collector {
    env: Box<dyn Env>,
    rng: Rng,
}

impl Collector {
    fn collect(&mut self, model: &Model, params: &Params, mode: ActMode, n: usize) -> Result<Vec<Episode>> {
        (0..n)
            .map(|_| {
                let reset = self.rng.gen();
                run_episode(model, params, self.env.as_mut(), &mut self.rng, mode, reset)
            })
            .collect()
    }
}

fn collect_phase(collectors: &mut [Collector], model: &Model, params: &Params, mode: ActMode, n: usize) -> Result<Vec<Episode>> {
    let w = collectors.len();
    if w == 1 {
        return collectors[0].collect(model, params, mode, n);
    }
    // worker j takes episodes j, j + w, ...; merge back in that order
    let per: Vec<Vec<Episode>> = std::thread::scope(|scope| {
        let handles: Vec<_> = collectors
            .iter_mut()
            .enumerate()
            .map(|(j, c)| {
                let share = n / w + usize::from(j < n % w);
                scope.spawn(move || c.collect(model, params, mode, share))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut iters: Vec<_> = per.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.extend(iters[k % w].next());
    }
    Ok(out)
}

/// Runs the full training loop and a final greedy evaluation.
///
/// Records are emitted each time the environment-step count crosses a
/// multiple of `log_interval`, and once more at the end if anything was
/// accumulated since the last record.
pub fn train(
    env_cfg: &EnvConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log_interval: u64,
    checkpoint_every: Option<u64>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    env_cfg.validate()?;
    cfg.validate()?;
    let probe = env_cfg.build()?;
    let model = Model::new(model_cfg, probe.spec())?;
    drop(probe);
    let mut learner = Learner::new(model, cfg.clone())?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let mut replay_rng = stream(cfg.seed, Stream::Replay);
    let mut collectors = (0..cfg.workers)
        .map(|w| {
            Ok(Collector {
                env: env_cfg.build()?,
                rng: if cfg.workers == 1 {
                    stream(cfg.seed, Stream::Act)
                } else {
                    stream(cfg.seed, Stream::Worker(w as u32))
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let me = model_cfg.variant.max_entropy();
    let log_interval = log_interval.max(1);
    let mut next_log = log_interval;
    let mut next_ckpt = checkpoint_every.map(|c| c.max(1));
    let mut env_steps = 0u64;
    let mut episodes = 0u64;
    let mut stats = IntervalStats::default();
    let warmup = cfg.warmup_episodes.max(1);

    let record = |stats: &mut IntervalStats, learner: &Learner, env_steps: u64, episodes: u64| {
        let alpha = me.then(|| learner.params.temp.alpha());
        let eps = (!me).then(|| cfg.epsilon.value(env_steps));
        stats.flush(env_steps, episodes, alpha, eps)
    };

    while env_steps < cfg.total_steps && !observer.cancelled() {
        let mode = ActMode::Stochastic {
            epsilon: cfg.epsilon.value(env_steps),
        };
        let eps = collect_phase(&mut collectors, &learner.model, &learner.params, mode, cfg.train_interval)?;
        for ep in eps {
            env_steps += ep.len() as u64;
            episodes += 1;
            stats.add_episode(ep.total_return(), ep.success);
            buffer.push(ep);
        }
        if buffer.len() >= warmup {
            let sample = buffer.sample(&mut replay_rng, cfg.batch_size);
            let batch = Batch::from_episodes(&learner.model, &sample)?;
            let s = learner.update(&batch)?;
            stats.add_update(&s);
        }
        if env_steps >= next_log {
            let rec = record(&mut stats, &learner, env_steps, episodes);
            observer.on_metrics(&rec)?;
            while next_log <= env_steps {
                next_log += log_interval;
            }
        }
        if let Some(nc) = next_ckpt.as_mut() {
            if env_steps >= *nc {
                observer.on_checkpoint(env_steps, &learner.params)?;
                let every = checkpoint_every.unwrap_or(1).max(1);
                while *nc <= env_steps {
                    *nc += every;
                }
            }
        }
    }
    if !stats.is_empty() {
        let rec = record(&mut stats, &learner, env_steps, episodes);
        observer.on_metrics(&rec)?;
    }
    observer.on_checkpoint(env_steps, &learner.params)?;

    let final_eval = evaluate(&learner.model, &learner.params, env_cfg, ActMode::Greedy, cfg.eval_episodes.max(1), cfg.seed)?;
    let mut env = env_cfg.build()?;
    let q_tot_table = q_tot_table(&learner.model, &learner.params, env.as_mut())?;
    Ok(TrainOutcome {
        learner,
        env_steps,
        episodes,
        final_eval,
        q_tot_table,
        buffer,
    })
}
