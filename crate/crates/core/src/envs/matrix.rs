use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_actions, Env, EnvSpec, StepResult};
use crate::{Error, Result};

/// Two-player one-step cooperative game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixGameConfig {
    #[serde(default = "MatrixGameConfig::default_payoff")]
    pub payoff: Vec<Vec<f64>>,
}

impl MatrixGameConfig {
    /// Non-monotonic payoff: (A,A) = 8 is optimal, miscoordinating on A costs −12.
    pub fn default_payoff() -> Vec<Vec<f64>> {
        vec![
            vec![8.0, -12.0, -12.0],
            vec![-12.0, 0.0, 0.0],
            vec![-12.0, 0.0, 0.0],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.payoff.len();
        if n < 2 {
            return Err(Error::Config("payoff needs at least 2 actions".into()));
        }
        if self.payoff.iter().any(|row| row.len() != n) {
            return Err(Error::Config("payoff matrix must be square".into()));
        }
        if self.payoff.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("payoff entries must be finite".into()));
        }
        Ok(())
    }
}

impl Default for MatrixGameConfig {
    fn default() -> Self {
        MatrixGameConfig {
            payoff: Self::default_payoff(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixGame {
    cfg: MatrixGameConfig,
    spec: EnvSpec,
    done: bool,
}

impl MatrixGame {
    pub fn new(cfg: MatrixGameConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvSpec {
            n_agents: 2,
            n_actions: cfg.payoff.len(),
            obs_dim: 1,
            state_dim: 1,
            episode_limit: 1,
            gamma: 0.99,
        };
        Ok(MatrixGame {
            cfg,
            spec,
            done: false,
        })
    }

    pub fn payoff(&self) -> &[Vec<f64>] {
        &self.cfg.payoff
    }
}

impl Env for MatrixGame {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.done = false;
        (self.global_state(), self.observe_all())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        check_actions(joint_action, &self.spec)?;
        self.done = true;
        let reward = self.cfg.payoff[joint_action[0]][joint_action[1]];
        let best = self.cfg.payoff.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut info = BTreeMap::new();
        // success: the optimal joint action was played
        info.insert("success".to_string(), if reward == best { 1.0 } else { 0.0 });
        Ok(StepResult {
            next_obs: self.observe_all(),
            next_state: self.global_state(),
            reward,
            done: true,
            info,
        })
    }

    fn observe(&self, _agent: usize) -> Vec<f64> {
        vec![1.0]
    }

    fn global_state(&self) -> Vec<f64> {
        vec![1.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_is_payoff_for_every_pair() {
        let cfg = MatrixGameConfig::default();
        for a in 0..3 {
            for b in 0..3 {
                let mut g = MatrixGame::new(cfg.clone()).unwrap();
                let (s, o) = g.reset(a as u64 * 3 + b as u64);
                assert_eq!(s, vec![1.0]);
                assert_eq!(o, vec![vec![1.0], vec![1.0]]);
                let r = g.step(&[a, b]).unwrap();
                assert_eq!(r.reward, cfg.payoff[a][b]);
                assert!(r.done);
            }
        }
    }

    #[test]
    fn table_entries() {
        let mut g = MatrixGame::new(MatrixGameConfig::default()).unwrap();
        g.reset(0);
        assert_eq!(g.step(&[0, 0]).unwrap().reward, 8.0);
        g.reset(0);
        assert_eq!(g.step(&[0, 1]).unwrap().reward, -12.0);
        g.reset(0);
        assert_eq!(g.step(&[1, 2]).unwrap().reward, 0.0);
    }

    #[test]
    fn stepping_finished_episode_is_error() {
        let mut g = MatrixGame::new(MatrixGameConfig::default()).unwrap();
        g.reset(1);
        g.step(&[0, 0]).unwrap();
        assert!(matches!(g.step(&[0, 0]), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn out_of_range_action() {
        let mut g = MatrixGame::new(MatrixGameConfig::default()).unwrap();
        g.reset(1);
        assert!(matches!(g.step(&[3, 0]), Err(Error::InvalidAction { .. })));
    }

    #[test]
    fn non_square_rejected() {
        let cfg = MatrixGameConfig {
            payoff: vec![vec![1.0, 2.0], vec![3.0]],
        };
        assert!(MatrixGame::new(cfg).is_err());
    }
}
