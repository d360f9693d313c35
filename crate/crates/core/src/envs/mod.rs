//! Decentralized POMDP environments with a shared team reward.

mod gridworld;
mod matrix;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use gridworld::{Cell, GridWorld, GridWorldConfig};
pub use matrix::{MatrixGame, MatrixGameConfig};

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_obs: Vec<Vec<f64>>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: BTreeMap<String, f64>,
}

/// Uniform step interface shared by every environment.
pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Puts the environment in its initial state; returns `(state, per-agent obs)`.
    fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>);

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult>;

    fn observe(&self, agent: usize) -> Vec<f64>;

    fn global_state(&self) -> Vec<f64>;

    fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.spec().n_agents).map(|i| self.observe(i)).collect()
    }
}

/// Environment selection as it appears in the `[env]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvConfig {
    Matrix(MatrixGameConfig),
    Gridworld(GridWorldConfig),
}

impl EnvConfig {
    pub fn by_name(name: &str) -> Option<EnvConfig> {
        match name {
            "matrix" => Some(EnvConfig::Matrix(MatrixGameConfig::default())),
            "gridworld" => Some(EnvConfig::Gridworld(GridWorldConfig::default())),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Matrix(_) => "matrix",
            EnvConfig::Gridworld(_) => "gridworld",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Matrix(c) => c.validate(),
            EnvConfig::Gridworld(c) => c.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Env>> {
        Ok(match self {
            EnvConfig::Matrix(c) => Box::new(MatrixGame::new(c.clone())?),
            EnvConfig::Gridworld(c) => Box::new(GridWorld::new(c.clone())?),
        })
    }
}

pub(crate) fn check_actions(joint: &[usize], spec: &EnvSpec) -> Result<()> {
    if joint.len() != spec.n_agents {
        return Err(crate::Error::Shape(format!(
            "expected {} actions, got {}",
            spec.n_agents,
            joint.len()
        )));
    }
    for (agent, &action) in joint.iter().enumerate() {
        if action >= spec.n_actions {
            return Err(crate::Error::InvalidAction {
                agent,
                action,
                n_actions: spec.n_actions,
            });
        }
    }
    Ok(())
}
