//! Replay-driven training: episode collection, entropy-corrected TD(λ) targets,
//! the value loss L(θ), the OPT loss L(φ), the temperature loss L(ω) and
//! target-network maintenance.

mod model;
mod replay;
mod targets;
mod train;
mod update;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use model::{run_episode, ActMode, Model, Params};
pub use replay::{Episode, ReplayBuffer, Transition};
pub use targets::{soft_value, td_lambda_targets};
pub use train::{evaluate, q_tot_table, train, EvalReport, TrainObserver, TrainOutcome};
pub use update::{phi_loss, theta_forward, theta_loss, Batch, Learner, PhiLoss, PhiOutput, ThetaLoss, ThetaOutput, UpdateStats};

use crate::agentnet::{AgentNetConfig, EpsilonSchedule};
use crate::mixer::{MixerConfig, MixerKind};
use crate::opt::OptConfig;
use crate::policy::HeadKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    MeQmix,
    MeVdn,
    Qmix,
    Vdn,
    /// Softmax directly on the local Q-values: entropy without OPT.
    MeQmixNoopt,
    /// OPT replaced by an unconstrained MLP over `(Q_i, s)`.
    MeQmixMlp,
}

impl Algo {
    pub const ALL: [Algo; 6] = [
        Algo::MeQmix,
        Algo::MeVdn,
        Algo::Qmix,
        Algo::Vdn,
        Algo::MeQmixNoopt,
        Algo::MeQmixMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::MeQmix => "me-qmix",
            Algo::MeVdn => "me-vdn",
            Algo::Qmix => "qmix",
            Algo::Vdn => "vdn",
            Algo::MeQmixNoopt => "me-qmix-noopt",
            Algo::MeQmixMlp => "me-qmix-mlp",
        }
    }

    pub fn mixer_kind(self) -> MixerKind {
        match self {
            Algo::MeVdn | Algo::Vdn => MixerKind::Vdn,
            _ => MixerKind::Qmix,
        }
    }

    /// `None` for the ε-greedy baselines.
    pub fn head_kind(self) -> Option<HeadKind> {
        match self {
            Algo::MeQmix | Algo::MeVdn => Some(HeadKind::Opt),
            Algo::MeQmixNoopt => Some(HeadKind::Raw),
            Algo::MeQmixMlp => Some(HeadKind::Mlp),
            Algo::Qmix | Algo::Vdn => None,
        }
    }

    pub fn max_entropy(self) -> bool {
        self.head_kind().is_some()
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Algo::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown algorithm '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Network shapes for one algorithm variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Algo,
    pub obs_window: usize,
    pub hidden_dims: Vec<usize>,
    pub agent_id_onehot: bool,
    pub mixing_embed_dim: usize,
    pub hypernet_embed_dim: usize,
    pub mixer_layers: usize,
    pub opt_d1: usize,
    pub opt_layers: usize,
    pub opt_embed_dim: usize,
}

impl ModelConfig {
    /// Defaults for `algo` on the named environment.
    pub fn for_env(algo: Algo, env_name: &str) -> Self {
        let grid = env_name == "gridworld";
        ModelConfig {
            variant: algo,
            obs_window: if grid { 4 } else { 1 },
            hidden_dims: vec![64, 64],
            agent_id_onehot: grid,
            mixing_embed_dim: 32,
            hypernet_embed_dim: 64,
            mixer_layers: 2,
            opt_d1: 32,
            opt_layers: 2,
            opt_embed_dim: 64,
        }
    }

    pub fn agent_config(&self, n_actions: usize) -> AgentNetConfig {
        AgentNetConfig {
            obs_window: self.obs_window,
            hidden_dims: self.hidden_dims.clone(),
            n_actions,
            agent_id_onehot: self.agent_id_onehot,
        }
    }

    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            kind: self.variant.mixer_kind(),
            mixing_embed_dim: self.mixing_embed_dim,
            hypernet_embed_dim: self.hypernet_embed_dim,
            num_layers: self.mixer_layers,
        }
    }

    pub fn opt_config(&self) -> OptConfig {
        OptConfig {
            d1: self.opt_d1,
            num_layers: self.opt_layers,
            hypernet_embed_dim: self.opt_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.agent_config(2).validate()?;
        self.mixer_config().validate()?;
        self.opt_config().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Copy online weights every `hard_interval` updates.
    Hard,
    /// `θ⁻ ← τθ + (1−τ)θ⁻` after every update.
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Environment steps to collect.
    pub total_steps: u64,
    pub lr: f64,
    /// Learning rate of the policy head; defaults to `lr`.
    pub opt_lr: Option<f64>,
    pub lambda: f64,
    pub gamma: f64,
    /// Episodes per batch.
    pub batch_size: usize,
    /// Capacity in episodes.
    pub buffer_size: usize,
    pub target_mode: TargetMode,
    pub tau: f64,
    pub hard_interval: u64,
    /// Episodes collected between gradient steps.
    pub train_interval: usize,
    /// Episodes collected before the first gradient step.
    pub warmup_episodes: usize,
    pub alpha_init: f64,
    pub alpha_lr: f64,
    /// Keep α at `alpha_init` instead of learning it.
    pub fixed_alpha: bool,
    /// Defaults to 0.24 per agent.
    pub target_entropy: Option<f64>,
    pub epsilon: EpsilonSchedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub workers: usize,
    /// Rows per gradient step on which the Q-gap is measured.
    pub q_gap_states: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            total_steps: 10_000,
            lr: 0.001,
            opt_lr: None,
            lambda: 0.4,
            gamma: 0.99,
            batch_size: 128,
            buffer_size: 5000,
            target_mode: TargetMode::Hard,
            tau: 0.005,
            hard_interval: 200,
            train_interval: 1,
            warmup_episodes: 100,
            alpha_init: 1.0,
            alpha_lr: 0.3,
            fixed_alpha: false,
            target_entropy: None,
            epsilon: EpsilonSchedule::default(),
            grad_clip: 10.0,
            workers: 1,
            q_gap_states: 16,
            eval_episodes: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.buffer_size == 0 || self.train_interval == 0 {
            return bad("batch_size, buffer_size and train_interval must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if !(self.lr > 0.0 && self.alpha_lr >= 0.0 && self.opt_lr.is_none_or(|l| l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return bad("alpha_init must be positive");
        }
        if self.target_mode == TargetMode::Hard && self.hard_interval == 0 {
            return bad("hard_interval must be positive");
        }
        if self.target_mode == TargetMode::Ema && !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    pub fn target_entropy_for(&self, n_agents: usize) -> f64 {
        self.target_entropy
            .unwrap_or_else(|| crate::policy::default_target_entropy(n_agents))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algo_names_roundtrip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!("bogus".parse::<Algo>().is_err());
    }

    #[test]
    fn default_train_config_is_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lr, c.lambda, c.batch_size, c.buffer_size, c.hard_interval), (0.001, 0.4, 128, 5000, 200));
        assert_eq!(c.target_entropy_for(2), 0.48);
        let mut bad = c.clone();
        bad.lambda = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.gamma = 1.0;
        assert!(bad.validate().is_err());
    }
}
