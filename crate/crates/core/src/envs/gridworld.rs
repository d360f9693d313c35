//! Two-agent pressure-plate gridworld.
//!
//! The goal corridor (column x = 3 by default) is enclosed by walls and reachable
//! only through a gate cell. The gate opens permanently the first time both
//! pressure plates are occupied at once. The team is rewarded when both agents
//! stand on goal cells. Each agent observes only its own position, so opening the
//! gate and filing through it one at a time has to be coordinated implicitly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_actions, Env, EnvSpec, StepResult};
use crate::{Error, Result};

/// `[x, y]`, with y growing downwards.
pub type Cell = [usize; 2];

pub const N_MOVES: usize = 5;
const UP: usize = 0;
const DOWN: usize = 1;
const LEFT: usize = 2;
const RIGHT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldConfig {
    pub width: usize,
    pub height: usize,
    pub plate_cells: Vec<Cell>,
    pub gate_cells: Vec<Cell>,
    pub goal_cells: Vec<Cell>,
    pub wall_cells: Vec<Cell>,
    pub start_cells: Vec<Cell>,
    pub step_reward: f64,
    pub success_reward: f64,
    pub episode_limit: usize,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        GridWorldConfig {
            width: 7,
            height: 5,
            plate_cells: vec![[1, 2], [5, 2]],
            gate_cells: vec![[3, 2]],
            goal_cells: vec![[3, 0], [3, 4]],
            wall_cells: vec![
                [2, 0],
                [2, 1],
                [2, 3],
                [2, 4],
                [4, 0],
                [4, 1],
                [4, 3],
                [4, 4],
            ],
            start_cells: vec![[0, 2], [6, 2]],
            step_reward: 0.0,
            success_reward: 10.0,
            episode_limit: 50,
        }
    }
}

impl GridWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.episode_limit == 0 {
            return bad("episode_limit must be at least 1".into());
        }
        if self.plate_cells.len() != 2 || self.goal_cells.len() != 2 || self.start_cells.len() != 2 {
            return bad("gridworld needs exactly 2 plates, 2 goals and 2 agents".into());
        }
        for (label, cells) in [
            ("plate", &self.plate_cells),
            ("gate", &self.gate_cells),
            ("goal", &self.goal_cells),
            ("wall", &self.wall_cells),
            ("start", &self.start_cells),
        ] {
            if let Some(c) = cells.iter().find(|c| c[0] >= self.width || c[1] >= self.height) {
                return bad(format!("{label} cell {c:?} is out of bounds"));
            }
        }
        if let Some(c) = self
            .start_cells
            .iter()
            .chain(&self.goal_cells)
            .find(|c| self.wall_cells.contains(c))
        {
            return bad(format!("start/goal cell {c:?} is a wall"));
        }
        if self.start_cells[0] == self.start_cells[1] {
            return bad("agents must start on distinct cells".into());
        }
        if ![self.step_reward, self.success_reward].iter().all(|r| r.is_finite()) {
            return bad("rewards must be finite".into());
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    cfg: GridWorldConfig,
    spec: EnvSpec,
    pos: [Cell; 2],
    gate_open: bool,
    t: usize,
    done: bool,
}

impl GridWorld {
    pub fn new(cfg: GridWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let cells = cfg.n_cells();
        let spec = EnvSpec {
            n_agents: 2,
            n_actions: N_MOVES,
            obs_dim: cells + 2,
            state_dim: 2 * cells + 2,
            episode_limit: cfg.episode_limit,
            gamma: 0.99,
        };
        let pos = [cfg.start_cells[0], cfg.start_cells[1]];
        let mut g = GridWorld {
            cfg,
            spec,
            pos,
            gate_open: false,
            t: 0,
            done: false,
        };
        g.update_gate();
        Ok(g)
    }

    pub fn positions(&self) -> [Cell; 2] {
        self.pos
    }

    pub fn gate_open(&self) -> bool {
        self.gate_open
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    fn index(&self, c: Cell) -> usize {
        c[1] * self.cfg.width + c[0]
    }

    fn passable(&self, c: Cell) -> bool {
        !self.cfg.wall_cells.contains(&c) && (self.gate_open || !self.cfg.gate_cells.contains(&c))
    }

    fn target(&self, from: Cell, action: usize) -> Cell {
        let [x, y] = from;
        let to = match action {
            UP if y > 0 => [x, y - 1],
            DOWN if y + 1 < self.cfg.height => [x, y + 1],
            LEFT if x > 0 => [x - 1, y],
            RIGHT if x + 1 < self.cfg.width => [x + 1, y],
            _ => from,
        };
        if self.passable(to) {
            to
        } else {
            from
        }
    }

    fn update_gate(&mut self) {
        let plates = &self.cfg.plate_cells;
        if plates.iter().all(|p| self.pos.contains(p)) {
            self.gate_open = true;
        }
    }

    fn on_goals(&self) -> bool {
        self.pos.iter().all(|p| self.cfg.goal_cells.contains(p))
    }

    fn time_feature(&self) -> f64 {
        self.t as f64 / self.cfg.episode_limit as f64
    }
}

impl Env for GridWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.pos = [self.cfg.start_cells[0], self.cfg.start_cells[1]];
        self.gate_open = false;
        self.t = 0;
        self.done = false;
        self.update_gate();
        (self.global_state(), self.observe_all())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        check_actions(joint_action, &self.spec)?;
        let targets = [
            self.target(self.pos[0], joint_action[0]),
            self.target(self.pos[1], joint_action[1]),
        ];
        let clash = targets[0] == targets[1];
        let swap = targets[0] == self.pos[1] && targets[1] == self.pos[0];
        if !clash && !swap {
            self.pos = targets;
        }
        self.update_gate();
        self.t += 1;

        let success = self.on_goals();
        let reward = if success {
            self.cfg.success_reward
        } else {
            self.cfg.step_reward
        };
        self.done = success || self.t >= self.cfg.episode_limit;
        let mut info = BTreeMap::new();
        info.insert("success".to_string(), if success { 1.0 } else { 0.0 });
        info.insert("gate_open".to_string(), if self.gate_open { 1.0 } else { 0.0 });
        Ok(StepResult {
            next_obs: self.observe_all(),
            next_state: self.global_state(),
            reward,
            done: self.done,
            info,
        })
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.spec.obs_dim];
        obs[self.index(self.pos[agent])] = 1.0;
        obs[self.cfg.n_cells()] = if self.gate_open { 1.0 } else { 0.0 };
        obs[self.cfg.n_cells() + 1] = self.time_feature();
        obs
    }

    fn global_state(&self) -> Vec<f64> {
        let cells = self.cfg.n_cells();
        let mut s = vec![0.0; self.spec.state_dim];
        s[self.index(self.pos[0])] = 1.0;
        s[cells + self.index(self.pos[1])] = 1.0;
        s[2 * cells] = if self.gate_open { 1.0 } else { 0.0 };
        s[2 * cells + 1] = self.time_feature();
        s
    }
}
