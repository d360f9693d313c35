//! Soft local policies `π_i = softmax(head_i(Q_i, s) / α)` and the learned temperature.
//!
//! The head is an OPT for the ME variants, an unconstrained MLP for the
//! ablation that drops order preservation, or the identity ("raw") for the
//! entropy-only ablation.

use std::cell::Cell;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agentnet::greedy_action;
use crate::diffmath::{adam_step, log_softmax, softmax, AdamConfig, Mlp, MlpCache, ParamStore};
use crate::opt::{OptCache, OptConfig, OptSet};
use crate::{Error, Result};

thread_local! {
    static STATE_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward passes on this thread that consumed the global state.
/// Greedy execution must leave it unchanged.
pub fn state_reads() -> u64 {
    STATE_READS.with(Cell::get)
}

pub(crate) fn record_state_read() {
    STATE_READS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn from_logits(logits: &[f64], alpha: f64) -> Self {
        PolicyDistribution {
            probs: softmax(logits, alpha),
            log_probs: log_softmax(logits, alpha),
        }
    }

    /// Highest-probability action, lowest index on ties.
    pub fn argmax(&self) -> usize {
        greedy_action(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| p * l)
            .sum::<f64>()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(&self.probs)
            .expect("policy probabilities are a distribution")
            .sample(rng)
    }
}

/// Independent per-agent draws; the joint log-probability is the sum of the
/// per-agent ones.
pub fn sample_joint<R: Rng>(policies: &[PolicyDistribution], rng: &mut R) -> (Vec<usize>, f64) {
    let actions: Vec<usize> = policies.iter().map(|p| p.sample(rng)).collect();
    let logp = joint_log_prob(policies, &actions);
    (actions, logp)
}

pub fn joint_log_prob(policies: &[PolicyDistribution], actions: &[usize]) -> f64 {
    policies.iter().zip(actions).map(|(p, &u)| p.log_probs[u]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Opt,
    Mlp,
    Raw,
}

/// Per-agent map from a Q-vector (and state) to logits.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHead {
    Opt(OptSet),
    Mlp(Vec<Mlp>),
    Raw,
}

#[derive(Debug, Clone)]
pub enum HeadCache {
    Opt(OptCache),
    Mlp(MlpCache),
    Raw,
}

impl PolicyHead {
    pub fn new(kind: HeadKind, cfg: &OptConfig, n_agents: usize, n_actions: usize, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match kind {
            HeadKind::Opt => PolicyHead::Opt(OptSet::new(cfg, n_agents, state_dim)?),
            HeadKind::Mlp => {
                let h = cfg.hypernet_embed_dim;
                PolicyHead::Mlp(
                    (0..n_agents)
                        .map(|i| Mlp::new(&format!("mlp{i}"), &[n_actions + state_dim, h, h, n_actions]))
                        .collect(),
                )
            }
            HeadKind::Raw => PolicyHead::Raw,
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            PolicyHead::Opt(_) => HeadKind::Opt,
            PolicyHead::Mlp(_) => HeadKind::Mlp,
            PolicyHead::Raw => HeadKind::Raw,
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            PolicyHead::Opt(set) => set.register(store, rng),
            PolicyHead::Mlp(nets) => nets.iter().try_for_each(|m| m.register(store, rng)),
            PolicyHead::Raw => Ok(()),
        }
    }

    /// Whether the head has trainable parameters (and hence an L(φ)).
    pub fn trainable(&self) -> bool {
        !matches!(self, PolicyHead::Raw)
    }

    fn mlp_input(q: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> Array2<f64> {
        concatenate(Axis(1), &[q, states]).expect("batch sizes agree")
    }

    /// Batched logits: `q` is B×A, `states` B×S.
    pub fn logits(&self, store: &ParamStore, agent: usize, q: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            PolicyHead::Opt(set) => set.agent(agent).infer(store, q, states),
            PolicyHead::Mlp(nets) => {
                record_state_read();
                nets[agent].infer(store, Self::mlp_input(q, states).view())
            }
            PolicyHead::Raw => q.to_owned(),
        }
    }

    pub fn forward(&self, store: &ParamStore, agent: usize, q: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> (Array2<f64>, HeadCache) {
        match self {
            PolicyHead::Opt(set) => {
                let (y, c) = set.agent(agent).forward(store, q, states);
                (y, HeadCache::Opt(c))
            }
            PolicyHead::Mlp(nets) => {
                record_state_read();
                let (y, c) = nets[agent].forward(store, Self::mlp_input(q, states).view());
                (y, HeadCache::Mlp(c))
            }
            PolicyHead::Raw => (q.to_owned(), HeadCache::Raw),
        }
    }

    /// Accumulates head-parameter gradients and returns `∂L/∂q`.
    pub fn backward(&self, store: &mut ParamStore, agent: usize, cache: &HeadCache, dout: ArrayView2<'_, f64>) -> Array2<f64> {
        match (self, cache) {
            (PolicyHead::Opt(set), HeadCache::Opt(c)) => set.agent(agent).backward(store, c, dout),
            (PolicyHead::Mlp(nets), HeadCache::Mlp(c)) => {
                let n_actions = dout.ncols();
                nets[agent].backward(store, c, dout).slice(s![.., ..n_actions]).to_owned()
            }
            (PolicyHead::Raw, HeadCache::Raw) => dout.to_owned(),
            _ => panic!("policy head cache does not match head"),
        }
    }

    pub fn logits_one(&self, store: &ParamStore, agent: usize, q: &[f64], state: &[f64]) -> Vec<f64> {
        let qv = ArrayView2::from_shape((1, q.len()), q).expect("row");
        let sv = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.logits(store, agent, qv, sv).row(0).to_vec()
    }
}

/// `softmax(head(q, s) / α)` for one agent.
pub fn local_policy(head: &PolicyHead, store: &ParamStore, agent: usize, q: &[f64], state: &[f64], alpha: f64) -> PolicyDistribution {
    PolicyDistribution::from_logits(&head.logits_one(store, agent, q, state), alpha)
}

pub fn default_target_entropy(n_agents: usize) -> f64 {
    0.24 * n_agents as f64
}

/// `L(ω) = mean(−α (log π_jt + H̄))` with `log π` held constant. Because
/// `α = exp(log_alpha)`, the derivative with respect to `log_alpha` equals the
/// loss itself.
pub fn temperature_loss(log_alpha: f64, log_pi_jt: &[f64], target_entropy: f64) -> (f64, f64) {
    if log_pi_jt.is_empty() {
        return (0.0, 0.0);
    }
    let alpha = log_alpha.exp();
    let mean = log_pi_jt.iter().map(|l| l + target_entropy).sum::<f64>() / log_pi_jt.len() as f64;
    let loss = -alpha * mean;
    (loss, loss)
}

pub const LOG_ALPHA: &str = "log_alpha";

/// `log_alpha` is kept inside this range so that `α` never rounds to 0 or overflows.
pub const LOG_ALPHA_BOUNDS: (f64, f64) = (-30.0, 30.0);

#[derive(Debug, Clone)]
pub struct TemperatureState {
    params: ParamStore,
    pub target_entropy: f64,
    adam: AdamConfig,
}

impl TemperatureState {
    pub fn new(alpha_init: f64, target_entropy: f64, lr: f64) -> Result<Self> {
        if !(alpha_init > 0.0 && alpha_init.is_finite()) {
            return Err(Error::Config(format!("initial alpha must be positive, got {alpha_init}")));
        }
        let mut params = ParamStore::new();
        params.insert(LOG_ALPHA, &[1], vec![alpha_init.ln()])?;
        Ok(TemperatureState {
            params,
            target_entropy,
            adam: AdamConfig::new(lr),
        })
    }

    pub fn log_alpha(&self) -> f64 {
        self.params.values(LOG_ALPHA)[0]
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// One Adam step on `log_alpha`; returns the loss before the step.
    pub fn update(&mut self, log_pi_jt: &[f64]) -> Result<f64> {
        let (loss, grad) = temperature_loss(self.log_alpha(), log_pi_jt, self.target_entropy);
        self.params.accumulate_grad(LOG_ALPHA, [grad].iter());
        adam_step(&mut self.params, &mut self.adam);
        let la = &mut self.params.values_mut(LOG_ALPHA)[0];
        *la = la.clamp(LOG_ALPHA_BOUNDS.0, LOG_ALPHA_BOUNDS.1);
        self.params.check_finite()?;
        Ok(loss)
    }
}
