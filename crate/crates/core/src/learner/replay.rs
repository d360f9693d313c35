use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One rollout. Index `t` of every vector refers to the same environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// `obs[t][agent]`, the observation the agent acted on at step `t`.
    pub obs: Vec<Vec<Vec<f64>>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// `log_pi[t][agent] = log π_i(u_t^i)` under the behaviour policy.
    pub log_pi: Vec<Vec<f64>>,
    pub dones: Vec<bool>,
    pub success: bool,
}

/// Flat view of one step together with its successor, as consumed by targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_state: Option<Vec<f64>>,
    pub next_obs: Option<Vec<Vec<f64>>>,
    pub next_actions: Option<Vec<usize>>,
    pub next_log_pi: Option<Vec<f64>>,
    pub done: bool,
}

impl Episode {
    pub fn new() -> Self {
        Episode {
            obs: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            log_pi: Vec::new(),
            dones: Vec::new(),
            success: false,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Joint log-probability of the stored action at each step.
    pub fn joint_log_pi(&self) -> Vec<f64> {
        self.log_pi.iter().map(|l| l.iter().sum()).collect()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        (0..self.len())
            .map(|t| {
                let has_next = !self.dones[t] && t + 1 < self.len();
                Transition {
                    state: self.states[t].clone(),
                    obs: self.obs[t].clone(),
                    actions: self.actions[t].clone(),
                    reward: self.rewards[t],
                    next_state: has_next.then(|| self.states[t + 1].clone()),
                    next_obs: has_next.then(|| self.obs[t + 1].clone()),
                    next_actions: has_next.then(|| self.actions[t + 1].clone()),
                    next_log_pi: has_next.then(|| self.log_pi[t + 1].clone()),
                    done: self.dones[t],
                }
            })
            .collect()
    }
}

impl Default for Episode {
    fn default() -> Self {
        Self::new()
    }
}

/// FIFO store of whole episodes.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            episodes: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn get(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Up to `n` distinct episodes, uniformly at random.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<&Episode> {
        let n = n.min(self.len());
        sample(rng, self.len(), n).into_iter().map(|i| &self.episodes[i]).collect()
    }
}
