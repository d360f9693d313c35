use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{Algo, Episode, ModelConfig, TrainConfig};
use crate::agentnet::{epsilon_greedy_action, greedy_action, AgentNet, ObsHistory};
use crate::diffmath::ParamStore;
use crate::envs::{Env, EnvSpec};
use crate::mixer::Mixer;
use crate::policy::{PolicyDistribution, PolicyHead, TemperatureState};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// The networks of one algorithm variant, without their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub spec: EnvSpec,
    pub agent: AgentNet,
    pub mixer: Mixer,
    pub head: Option<PolicyHead>,
}

/// Online value parameters θ, their target copy θ⁻, the policy-head parameters
/// φ and the temperature ω.
#[derive(Debug, Clone)]
pub struct Params {
    pub theta: ParamStore,
    pub target: ParamStore,
    pub phi: ParamStore,
    pub temp: TemperatureState,
}

const THETA: &str = "theta/";
const TARGET: &str = "target/";
const PHI: &str = "phi/";
const OMEGA: &str = "omega/";

impl Params {
    /// Single store holding every parameter set under a prefix.
    pub fn to_checkpoint(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (prefix, s) in [(THETA, &self.theta), (TARGET, &self.target), (PHI, &self.phi), (OMEGA, self.temp.params())] {
            out.merge_prefixed(prefix, s).expect("prefixes are disjoint");
        }
        out
    }

    /// Replaces values with those of a checkpoint produced for the same model.
    pub fn load_checkpoint(&mut self, ckpt: &ParamStore) -> Result<()> {
        let parts = [
            (THETA, &mut self.theta),
            (TARGET, &mut self.target),
            (PHI, &mut self.phi),
            (OMEGA, self.temp.params_mut()),
        ];
        for (prefix, store) in parts {
            let loaded = ckpt.split_prefixed(prefix);
            if !loaded.same_layout(store) {
                return Err(Error::Checkpoint(format!(
                    "parameters under '{prefix}' do not match the configured model"
                )));
            }
            store.copy_values_from(&loaded);
        }
        Ok(())
    }
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActMode {
    /// Per-agent argmax of the local Q-values; never touches the global state.
    Greedy,
    /// Sample from the soft policies (entropy variants) or act ε-greedily (baselines).
    Stochastic { epsilon: f64 },
}

impl Model {
    pub fn new(cfg: &ModelConfig, spec: &EnvSpec) -> Result<Self> {
        cfg.validate()?;
        let agent = AgentNet::new(cfg.agent_config(spec.n_actions), spec.obs_dim, spec.n_agents)?;
        let mixer = Mixer::new(&cfg.mixer_config(), spec.n_agents, spec.state_dim)?;
        let head = cfg
            .variant
            .head_kind()
            .map(|k| PolicyHead::new(k, &cfg.opt_config(), spec.n_agents, spec.n_actions, spec.state_dim))
            .transpose()?;
        Ok(Model {
            cfg: cfg.clone(),
            spec: spec.clone(),
            agent,
            mixer,
            head,
        })
    }

    pub fn algo(&self) -> Algo {
        self.cfg.variant
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.spec.n_actions
    }

    pub fn init_params(&self, train: &TrainConfig) -> Result<Params> {
        let mut rng = stream(train.seed, Stream::Init);
        let mut theta = ParamStore::new();
        self.agent.register(&mut theta, &mut rng)?;
        self.mixer.register(&mut theta, &mut rng)?;
        let mut phi = ParamStore::new();
        if let Some(h) = &self.head {
            h.register(&mut phi, &mut rng)?;
        }
        let target = theta.snapshot();
        let temp = TemperatureState::new(train.alpha_init, train.target_entropy_for(self.n_agents()), train.alpha_lr)?;
        Ok(Params { theta, target, phi, temp })
    }

    /// Temperature used in targets and policies: the learned α for entropy
    /// variants, 0 for the baselines.
    pub fn alpha(&self, params: &Params) -> f64 {
        if self.algo().max_entropy() {
            params.temp.alpha()
        } else {
            0.0
        }
    }

    /// Agent-network input rows (agent-major within a step) for one step.
    pub fn step_inputs(&self, windows: &[Vec<f64>]) -> Result<Array2<f64>> {
        let d = self.agent.input_dim();
        let mut x = Array2::zeros((windows.len(), d));
        for (i, w) in windows.iter().enumerate() {
            let row = self.agent.build_input(w, i)?;
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(x)
    }

    /// Input rows for every step of an episode, row `t·n + i` for agent `i` at step `t`.
    pub fn episode_inputs(&self, ep: &Episode) -> Result<Array2<f64>> {
        let n = self.n_agents();
        let d = self.agent.input_dim();
        let mut hist: Vec<ObsHistory> = (0..n)
            .map(|_| ObsHistory::new(self.cfg.obs_window, self.spec.obs_dim))
            .collect();
        let mut x = Array2::zeros((ep.len() * n, d));
        for t in 0..ep.len() {
            for (i, h) in hist.iter_mut().enumerate() {
                h.push(&ep.obs[t][i]);
                let row = self.agent.build_input(&h.window(), i)?;
                x.row_mut(t * n + i).assign(&ndarray::ArrayView1::from(&row));
            }
        }
        Ok(x)
    }

    /// Local policies for one step from the agents' Q-vectors (`n × A`).
    pub fn policies(&self, params: &Params, q: ArrayView2<'_, f64>, state: &[f64]) -> Vec<PolicyDistribution> {
        let alpha = if self.algo().max_entropy() { params.temp.alpha() } else { 1.0 };
        (0..self.n_agents())
            .map(|i| {
                let qi = q.row(i).to_vec();
                let logits = match &self.head {
                    Some(h) => h.logits_one(&params.phi, i, &qi, state),
                    None => qi,
                };
                PolicyDistribution::from_logits(&logits, alpha)
            })
            .collect()
    }
}

/// Plays one episode. `reset_seed` is forwarded to the environment.
pub fn run_episode<R: Rng>(model: &Model, params: &Params, env: &mut dyn Env, rng: &mut R, mode: ActMode, reset_seed: u64) -> Result<Episode> {
    let n = model.n_agents();
    let (mut state, mut obs) = env.reset(reset_seed);
    let mut hist: Vec<ObsHistory> = (0..n)
        .map(|_| ObsHistory::new(model.cfg.obs_window, model.spec.obs_dim))
        .collect();
    let mut ep = Episode::new();
    loop {
        for (h, o) in hist.iter_mut().zip(&obs) {
            h.push(o);
        }
        let windows: Vec<Vec<f64>> = hist.iter().map(ObsHistory::window).collect();
        let q = model.agent.infer(&params.theta, model.step_inputs(&windows)?.view());
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { name: "agent q-values".into() });
        }
        let (actions, log_pi) = match mode {
            ActMode::Greedy => ((0..n).map(|i| greedy_action(q.row(i).as_slice().expect("contiguous"))).collect(), vec![0.0; n]),
            ActMode::Stochastic { epsilon } => {
                if model.algo().max_entropy() {
                    let pols = model.policies(params, q.view(), &state);
                    if pols.iter().flat_map(|p| &p.probs).any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { name: "policy probabilities".into() });
                    }
                    let u: Vec<usize> = pols.iter().map(|p| p.sample(rng)).collect();
                    let lp = pols.iter().zip(&u).map(|(p, &a)| p.log_probs[a]).collect();
                    (u, lp)
                } else {
                    let u = (0..n)
                        .map(|i| epsilon_greedy_action(q.row(i).as_slice().expect("contiguous"), epsilon, rng))
                        .collect();
                    (u, vec![0.0; n])
                }
            }
        };
        let res = env.step(&actions)?;
        ep.obs.push(obs);
        ep.states.push(state);
        ep.actions.push(actions);
        ep.rewards.push(res.reward);
        ep.log_pi.push(log_pi);
        ep.dones.push(res.done);
        if res.done {
            ep.success = res.info.get("success").is_some_and(|s| *s > 0.5);
            return Ok(ep);
        }
        state = res.next_state;
        obs = res.next_obs;
    }
}
