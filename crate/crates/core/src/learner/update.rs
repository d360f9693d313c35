use std::ops::Range;

use ndarray::{s, Array1, Array2};

use super::{td_lambda_targets, Episode, Model, Params, TargetMode, TrainConfig};
use crate::agentnet::QVector;
use crate::diffmath::{adam_step, AdamConfig, Differentiable, ParamStore};
use crate::diagnostics::q_gap_for_actions;
use crate::mixer::MixerCache;
use crate::policy::{HeadCache, PolicyDistribution};
use crate::{Error, Result};

/// Episodes flattened into step rows. Agent rows are step-major: row `t·n + i`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_pi_jt: Vec<f64>,
    pub episodes: Vec<Range<usize>>,
    pub n_agents: usize,
}

impl Batch {
    pub fn from_episodes(model: &Model, eps: &[&Episode]) -> Result<Batch> {
        let n = model.n_agents();
        let total: usize = eps.iter().map(|e| e.len()).sum();
        let mut inputs = Array2::zeros((total * n, model.agent.input_dim()));
        let mut states = Array2::zeros((total, model.spec.state_dim));
        let mut b = Batch {
            inputs: Array2::zeros((0, 0)),
            states: Array2::zeros((0, 0)),
            actions: Vec::with_capacity(total * n),
            rewards: Vec::with_capacity(total),
            dones: Vec::with_capacity(total),
            log_pi_jt: Vec::with_capacity(total),
            episodes: Vec::with_capacity(eps.len()),
            n_agents: n,
        };
        let mut row = 0;
        for ep in eps {
            let x = model.episode_inputs(ep)?;
            inputs.slice_mut(s![row * n..(row + ep.len()) * n, ..]).assign(&x);
            for t in 0..ep.len() {
                states.row_mut(row + t).assign(&ndarray::ArrayView1::from(&ep.states[t]));
            }
            b.actions.extend(ep.actions.iter().flatten());
            b.rewards.extend(&ep.rewards);
            b.dones.extend(&ep.dones);
            b.log_pi_jt.extend(ep.joint_log_pi());
            b.episodes.push(row..row + ep.len());
            row += ep.len();
        }
        b.inputs = inputs;
        b.states = states;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Q-values of the stored actions, `N × n`.
    pub fn chosen(&self, q_all: &Array2<f64>) -> Array2<f64> {
        let n = self.n_agents;
        Array2::from_shape_fn((self.len(), n), |(t, i)| q_all[[t * n + i, self.actions[t * n + i]]])
    }

    /// Q-vectors of every agent at step `t`.
    pub fn q_vectors(&self, q_all: &Array2<f64>, t: usize) -> Vec<QVector> {
        (0..self.n_agents)
            .map(|i| QVector(q_all.row(t * self.n_agents + i).to_vec()))
            .collect()
    }
}

/// `(Q_i(·) for every agent row, Q_tot at the stored actions)` without caches.
pub fn theta_forward(model: &Model, theta: &ParamStore, batch: &Batch) -> (Array2<f64>, Array1<f64>) {
    let q_all = model.agent.infer(theta, batch.inputs.view());
    let q_tot = model.mixer.infer(theta, batch.chosen(&q_all).view(), batch.states.view());
    (q_all, q_tot)
}

#[derive(Debug, Clone)]
pub struct ThetaOutput {
    pub loss: f64,
    pub q_all: Array2<f64>,
    pub q_tot: Array1<f64>,
}

/// `L(θ) = mean ½ (Q_tot − y)²`; accumulates gradients into `theta`.
pub fn theta_loss(model: &Model, theta: &mut ParamStore, batch: &Batch, targets: &[f64]) -> ThetaOutput {
    let n = batch.n_agents;
    let nb = batch.len() as f64;
    let (q_all, agent_cache) = model.agent.forward(theta, batch.inputs.view());
    let chosen = batch.chosen(&q_all);
    let (q_tot, mix_cache): (Array1<f64>, MixerCache) = model.mixer.forward(theta, chosen.view(), batch.states.view());
    let mut loss = 0.0;
    let mut dq_tot = vec![0.0; batch.len()];
    for t in 0..batch.len() {
        let e = q_tot[t] - targets[t];
        loss += 0.5 * e * e;
        dq_tot[t] = e / nb;
    }
    let dchosen = model.mixer.backward(theta, &mix_cache, &dq_tot);
    let mut dq_all = Array2::zeros(q_all.dim());
    for t in 0..batch.len() {
        for i in 0..n {
            dq_all[[t * n + i, batch.actions[t * n + i]]] = dchosen[[t, i]];
        }
    }
    model.agent.backward(theta, &agent_cache, dq_all.view());
    ThetaOutput {
        loss: loss / nb,
        q_all,
        q_tot,
    }
}

#[derive(Debug, Clone)]
pub struct PhiOutput {
    pub loss: f64,
    /// Per agent, `N × A` logits.
    pub logits: Vec<Array2<f64>>,
    /// `Σ_i head_i(Q_i, s)[u_i] − Q_tot` per step.
    pub delta: Vec<f64>,
}

fn phi_forward(model: &Model, phi: &ParamStore, batch: &Batch, q_all: &Array2<f64>, q_tot: &[f64]) -> (PhiOutput, Vec<HeadCache>) {
    let head = model.head.as_ref().expect("variant has a policy head");
    let n = batch.n_agents;
    let mut delta: Vec<f64> = q_tot.iter().map(|q| -q).collect();
    let mut logits = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for i in 0..n {
        let qi = q_all.slice(s![i..;n, ..]);
        let (y, c) = head.forward(phi, i, qi, batch.states.view());
        for (t, d) in delta.iter_mut().enumerate() {
            *d += y[[t, batch.actions[t * n + i]]];
        }
        logits.push(y);
        caches.push(c);
    }
    let loss = delta.iter().map(|d| d * d).sum::<f64>() / batch.len() as f64;
    (PhiOutput { loss, logits, delta }, caches)
}

/// `L(φ) = mean (Σ_i head_i(Q_i, s)[u_i] − Q_tot)²` with `Q_i` and `Q_tot`
/// held constant; accumulates gradients into `phi` only.
pub fn phi_loss(model: &Model, phi: &mut ParamStore, batch: &Batch, q_all: &Array2<f64>, q_tot: &[f64]) -> PhiOutput {
    let (out, caches) = phi_forward(model, phi, batch, q_all, q_tot);
    let head = model.head.as_ref().expect("variant has a policy head");
    if head.trainable() {
        let n = batch.n_agents;
        let scale = 2.0 / batch.len() as f64;
        for (i, c) in caches.iter().enumerate() {
            let mut dy = Array2::zeros(out.logits[i].dim());
            for t in 0..batch.len() {
                dy[[t, batch.actions[t * n + i]]] = scale * out.delta[t];
            }
            head.backward(phi, i, c, dy.view());
        }
    }
    out
}

/// L(θ) as a function of θ with fixed targets.
pub struct ThetaLoss<'a> {
    pub model: &'a Model,
    pub batch: &'a Batch,
    pub targets: &'a [f64],
}

impl Differentiable for ThetaLoss<'_> {
    fn loss(&self, theta: &ParamStore) -> f64 {
        let (_, q_tot) = theta_forward(self.model, theta, self.batch);
        q_tot.iter().zip(self.targets).map(|(q, y)| 0.5 * (q - y).powi(2)).sum::<f64>() / self.batch.len() as f64
    }

    fn loss_and_grad(&self, theta: &mut ParamStore) -> f64 {
        theta_loss(self.model, theta, self.batch, self.targets).loss
    }
}

/// L(φ) as a function of φ with fixed value-network outputs.
pub struct PhiLoss<'a> {
    pub model: &'a Model,
    pub batch: &'a Batch,
    pub q_all: &'a Array2<f64>,
    pub q_tot: &'a [f64],
}

impl Differentiable for PhiLoss<'_> {
    fn loss(&self, phi: &ParamStore) -> f64 {
        phi_forward(self.model, phi, self.batch, self.q_all, self.q_tot).0.loss
    }

    fn loss_and_grad(&self, phi: &mut ParamStore) -> f64 {
        phi_loss(self.model, phi, self.batch, self.q_all, self.q_tot).loss
    }
}

/// Summary of one gradient step; losses are evaluated before the step.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub loss_q: f64,
    pub loss_opt: Option<f64>,
    pub loss_alpha: Option<f64>,
    pub alpha: Option<f64>,
    pub joint_entropy: Option<f64>,
    pub q_gap: Option<f64>,
}

/// Owns the parameters and optimizer state; performs gradient steps.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: Model,
    pub params: Params,
    pub cfg: TrainConfig,
    adam_theta: AdamConfig,
    adam_phi: AdamConfig,
    pub updates: u64,
}

impl Learner {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model.init_params(&cfg)?;
        Ok(Learner {
            adam_theta: AdamConfig::new(cfg.lr),
            adam_phi: AdamConfig::new(cfg.opt_lr.unwrap_or(cfg.lr)),
            model,
            params,
            cfg,
            updates: 0,
        })
    }

    /// TD(λ) targets from the target network and the current temperature.
    pub fn targets(&self, batch: &Batch) -> Vec<f64> {
        let alpha = self.model.alpha(&self.params);
        let (_, q_tgt) = theta_forward(&self.model, &self.params.target, batch);
        let q_tgt = q_tgt.to_vec();
        let mut out = Vec::with_capacity(batch.len());
        for r in &batch.episodes {
            out.extend(td_lambda_targets(
                &batch.rewards[r.clone()],
                &q_tgt[r.clone()],
                &batch.log_pi_jt[r.clone()],
                &batch.dones[r.clone()],
                alpha,
                self.cfg.gamma,
                self.cfg.lambda,
            ));
        }
        out
    }

    pub fn update(&mut self, batch: &Batch) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let model = &self.model;
        let n = batch.n_agents;
        let targets = self.targets(batch);
        let th = theta_loss(model, &mut self.params.theta, batch, &targets);
        if !th.loss.is_finite() {
            return Err(Error::NonFinite { name: "loss_q".into() });
        }

        let mut stats = UpdateStats {
            loss_q: th.loss,
            loss_opt: None,
            loss_alpha: None,
            alpha: None,
            joint_entropy: None,
            q_gap: None,
        };

        let alpha = model.alpha(&self.params);
        let policy_logits: Vec<Array2<f64>> = if model.head.is_some() {
            let out = phi_loss(model, &mut self.params.phi, batch, &th.q_all, th.q_tot.as_slice().expect("contiguous"));
            if model.head.as_ref().is_some_and(|h| h.trainable()) {
                if !out.loss.is_finite() {
                    return Err(Error::NonFinite { name: "loss_opt".into() });
                }
                stats.loss_opt = Some(out.loss);
            }
            out.logits
        } else {
            (0..n).map(|i| th.q_all.slice(s![i..;n, ..]).to_owned()).collect()
        };

        // Q-gap of the local policies' argmax against the brute-force joint max,
        // measured with the parameters that produced this batch's values.
        let m = self.cfg.q_gap_states.min(batch.len());
        if m > 0 {
            let temp = if model.algo().max_entropy() { alpha } else { 1.0 };
            let mut sum = 0.0;
            for t in 0..m {
                let local: Vec<usize> = policy_logits
                    .iter()
                    .map(|l| PolicyDistribution::from_logits(l.row(t).as_slice().expect("contiguous"), temp).argmax())
                    .collect();
                let state = batch.states.row(t).to_vec();
                sum += q_gap_for_actions(&model.mixer, &self.params.theta, &batch.q_vectors(&th.q_all, t), &state, &local)?;
            }
            stats.q_gap = Some(sum / m as f64);
        }

        if self.cfg.grad_clip > 0.0 {
            self.params.theta.clip_grad_norm(self.cfg.grad_clip);
        }
        adam_step(&mut self.params.theta, &mut self.adam_theta);
        if model.head.as_ref().is_some_and(|h| h.trainable()) {
            if self.cfg.grad_clip > 0.0 {
                self.params.phi.clip_grad_norm(self.cfg.grad_clip);
            }
            adam_step(&mut self.params.phi, &mut self.adam_phi);
        }

        if model.algo().max_entropy() {
            // E_{u~π}[log π_jt(u|s)] = −H_jt(s), exactly, for every replayed state
            let mut expected_log_pi = vec![0.0; batch.len()];
            for l in &policy_logits {
                for (t, e) in expected_log_pi.iter_mut().enumerate() {
                    let row = l.row(t);
                    *e -= PolicyDistribution::from_logits(row.as_slice().expect("contiguous"), alpha).entropy();
                }
            }
            stats.joint_entropy = Some(-expected_log_pi.iter().sum::<f64>() / batch.len() as f64);
            stats.loss_alpha = Some(if self.cfg.fixed_alpha {
                crate::policy::temperature_loss(self.params.temp.log_alpha(), &expected_log_pi, self.params.temp.target_entropy).0
            } else {
                self.params.temp.update(&expected_log_pi)?
            });
            stats.alpha = Some(self.params.temp.alpha());
        }

        self.updates += 1;
        match self.cfg.target_mode {
            TargetMode::Hard => {
                if self.updates.is_multiple_of(self.cfg.hard_interval) {
                    self.params.target.copy_values_from(&self.params.theta);
                }
            }
            TargetMode::Ema => self.params.target.ema_from(&self.params.theta, self.cfg.tau),
        }
        self.params.theta.check_finite()?;
        self.params.phi.check_finite()?;
        self.params.temp.params().check_finite()?;
        Ok(stats)
    }
}
