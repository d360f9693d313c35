//! Run configuration: `[env]`, `[algo]`, `[train]` and `[log]` sections in
//! TOML. Every key is optional; unknown keys are rejected. A resolved
//! configuration has every environment-dependent default filled in and
//! reproduces its run exactly when loaded again.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::learner::{Algo, ModelConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    /// Environment steps between metrics records.
    pub interval: u64,
    pub out_dir: String,
    /// Environment steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algo: ModelConfig,
    pub train: TrainConfig,
    pub log: LogConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgo {
    variant: Option<Algo>,
    obs_window: Option<usize>,
    hidden_dims: Option<Vec<usize>>,
    agent_id_onehot: Option<bool>,
    mixing_embed_dim: Option<usize>,
    hypernet_embed_dim: Option<usize>,
    mixer_layers: Option<usize>,
    opt_d1: Option<usize>,
    opt_layers: Option<usize>,
    opt_embed_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLog {
    interval: Option<u64>,
    out_dir: Option<String>,
    checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    env: Option<EnvConfig>,
    algo: Option<RawAlgo>,
    train: Option<TrainConfig>,
    log: Option<RawLog>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub env: Option<String>,
    pub algo: Option<Algo>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub out_dir: Option<String>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Resolves a TOML document (possibly empty) plus overrides.
    pub fn resolve(text: &str, ov: &Overrides) -> Result<RunConfig> {
        let raw: RawRun = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let env = match (&ov.env, raw.env) {
            (Some(name), Some(file_env)) if file_env.name() == name => file_env,
            (Some(name), _) => EnvConfig::by_name(name)
                .ok_or_else(|| Error::Config(format!("unknown environment '{name}' (expected matrix or gridworld)")))?,
            (None, Some(e)) => e,
            (None, None) => EnvConfig::by_name("matrix").expect("built-in"),
        };
        let ra = raw.algo.unwrap_or_default();
        let variant = ov.algo.or(ra.variant).unwrap_or(Algo::MeQmix);
        let d = ModelConfig::for_env(variant, env.name());
        let algo = ModelConfig {
            variant,
            obs_window: ra.obs_window.unwrap_or(d.obs_window),
            hidden_dims: ra.hidden_dims.unwrap_or(d.hidden_dims),
            agent_id_onehot: ra.agent_id_onehot.unwrap_or(d.agent_id_onehot),
            mixing_embed_dim: ra.mixing_embed_dim.unwrap_or(d.mixing_embed_dim),
            hypernet_embed_dim: ra.hypernet_embed_dim.unwrap_or(d.hypernet_embed_dim),
            mixer_layers: ra.mixer_layers.unwrap_or(d.mixer_layers),
            opt_d1: ra.opt_d1.unwrap_or(d.opt_d1),
            opt_layers: ra.opt_layers.unwrap_or(d.opt_layers),
            opt_embed_dim: ra.opt_embed_dim.unwrap_or(d.opt_embed_dim),
        };
        let mut train = raw.train.unwrap_or_default();
        if let Some(s) = ov.seed {
            train.seed = s;
        }
        if let Some(s) = ov.steps {
            train.total_steps = s;
        }
        if let Some(w) = ov.workers {
            train.workers = w;
        }
        let rl = raw.log.unwrap_or_default();
        let log = LogConfig {
            interval: rl.interval.unwrap_or(match env.name() {
                "gridworld" => 2000,
                _ => 100,
            }),
            out_dir: ov.out_dir.clone().or(rl.out_dir).unwrap_or_else(|| "runs/default".into()),
            checkpoint_every: rl.checkpoint_every.unwrap_or(0),
        };
        let cfg = RunConfig { env, algo, train, log };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, ov: &Overrides) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::resolve(&text, ov)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.algo.validate()?;
        self.train.validate()?;
        if self.log.interval == 0 {
            return Err(Error::Config("log.interval must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
