//! Misalignment and policy-improvement diagnostics.
//!
//! All quantities enumerate the joint action space exactly, so they are only
//! available when it has at most [`JOINT_ENUMERATION_LIMIT`](crate::mixer::JOINT_ENUMERATION_LIMIT) entries.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::agentnet::{greedy_action, QVector};
use crate::diffmath::ParamStore;
use crate::learner::{theta_forward, Batch, Model, Params};
use crate::mixer::{enumerate_joint_actions, Mixer};
use crate::policy::PolicyDistribution;
use crate::Result;

fn joint_index(actions: &[usize], sizes: &[usize]) -> usize {
    actions.iter().zip(sizes).fold(0, |acc, (a, n)| acc * n + a)
}

/// `max_u Q_tot(s, u) − Q_tot(s, u_local)`.
pub fn q_gap_for_actions(mixer: &Mixer, theta: &ParamStore, q_vectors: &[QVector], state: &[f64], local: &[usize]) -> Result<f64> {
    let (_, values) = mixer.joint_values(theta, q_vectors, state)?;
    let sizes: Vec<usize> = q_vectors.iter().map(|q| q.0.len()).collect();
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(best - values[joint_index(local, &sizes)])
}

/// Whether the tuple of local greedy actions fails to maximize `Q_tot`.
pub fn igm_violated(mixer: &Mixer, theta: &ParamStore, q_vectors: &[QVector], state: &[f64]) -> Result<bool> {
    let greedy: Vec<usize> = q_vectors.iter().map(|q| greedy_action(&q.0)).collect();
    Ok(q_gap_for_actions(mixer, theta, q_vectors, state, &greedy)? > 0.0)
}

/// Exact `KL(p ‖ q)` between two factored joint policies, by enumeration.
pub fn joint_kl(p: &[PolicyDistribution], q: &[PolicyDistribution]) -> Result<f64> {
    let joints = enumerate_joint_actions(p.iter().map(|d| d.probs.len()))?;
    let mut kl = 0.0;
    for u in joints {
        let lp: f64 = p.iter().zip(&u).map(|(d, &a)| d.log_probs[a]).sum();
        let pp = lp.exp();
        if pp > 0.0 {
            let lq: f64 = q.iter().zip(&u).map(|(d, &a)| d.log_probs[a]).sum();
            kl += pp * (lp - lq);
        }
    }
    Ok(kl.max(0.0))
}

/// Per-step view of `Q_i` vectors and the local policies for a batch.
struct StepView {
    q_vectors: Vec<QVector>,
    policies: Vec<PolicyDistribution>,
    state: Vec<f64>,
}

fn step_views(model: &Model, params: &Params, batch: &Batch, rows: usize) -> Vec<StepView> {
    let n = batch.n_agents;
    let q_all = model.agent.infer(&params.theta, batch.inputs.slice(s![..rows * n, ..]));
    (0..rows)
        .map(|t| {
            let state = batch.states.row(t).to_vec();
            let q = q_all.slice(s![t * n..(t + 1) * n, ..]);
            StepView {
                q_vectors: (0..n).map(|i| QVector(q.row(i).to_vec())).collect(),
                policies: model.policies(params, q, &state),
                state,
            }
        })
        .collect()
}

/// `Σ_i head_i(Q_i, s)[u_i]` per step; the plain sum of chosen `Q_i` when the
/// variant has no policy head.
fn head_sum(model: &Model, params: &Params, q_vectors: &[QVector], state: &[f64], actions: &[usize]) -> f64 {
    q_vectors
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(i, (q, &a))| match &model.head {
            Some(h) => h.logits_one(&params.phi, i, &q.0, state)[a],
            None => q.0[a],
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaQStats {
    pub mean: f64,
    pub max: f64,
}

/// Statistics of `|Q_tot(s, u) − Σ_i head_i(Q_i, s)[u_i]|` at the stored actions.
pub fn delta_q(model: &Model, params: &Params, batch: &Batch) -> DeltaQStats {
    let n = batch.n_agents;
    let (q_all, q_tot) = theta_forward(model, &params.theta, batch);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for t in 0..batch.len() {
        let qv = batch.q_vectors(&q_all, t);
        let state = batch.states.row(t).to_vec();
        let d = (q_tot[t] - head_sum(model, params, &qv, &state, &batch.actions[t * n..(t + 1) * n])).abs();
        sum += d;
        max = max.max(d);
    }
    DeltaQStats {
        mean: if batch.is_empty() { 0.0 } else { sum / batch.len() as f64 },
        max,
    }
}

/// `C(s) = max_u |Q_tot^{old}(s, u) − Σ_i OPT_i^{new}(Q_i^{old}(u_i), s)|` over all joint actions.
fn c_constant(model: &Model, old: &Params, new: &Params, view: &StepView) -> Result<f64> {
    let (joints, values) = model.mixer.joint_values(&old.theta, &view.q_vectors, &view.state)?;
    let mut c: f64 = 0.0;
    for (u, q_tot) in joints.iter().zip(values) {
        c = c.max((q_tot - head_sum(model, new, &view.q_vectors, &view.state, u)).abs());
    }
    Ok(c)
}

/// `γ/(1−γ) · mean_s [C(s) · √(2 KL(π_old(·|s) ‖ π_new(·|s)))]` over the first
/// `rows` steps of `batch`, with the joint KL computed exactly.
pub fn improvement_bound(model: &Model, old: &Params, new: &Params, batch: &Batch, rows: usize, gamma: f64) -> Result<f64> {
    Ok(bound_terms(model, old, new, batch, rows)?.0 * gamma / (1.0 - gamma))
}

/// `(mean C·√(2KL), mean KL)`.
fn bound_terms(model: &Model, old: &Params, new: &Params, batch: &Batch, rows: usize) -> Result<(f64, f64)> {
    let rows = rows.min(batch.len());
    if rows == 0 {
        return Ok((0.0, 0.0));
    }
    let old_views = step_views(model, old, batch, rows);
    let new_views = step_views(model, new, batch, rows);
    let mut acc = 0.0;
    let mut kl_sum = 0.0;
    for (o, n) in old_views.iter().zip(&new_views) {
        let kl = joint_kl(&o.policies, &n.policies)?;
        kl_sum += kl;
        if kl > 0.0 {
            acc += c_constant(model, old, new, o)? * (2.0 * kl).sqrt();
        }
    }
    Ok((acc / rows as f64, kl_sum / rows as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub q_gap_mean: f64,
    pub q_gap_max: f64,
    pub igm_violation_rate: f64,
    pub delta_q_mean: f64,
    pub delta_q_max: f64,
    /// Only with a second parameter set.
    pub kl_old_new_mean: Option<f64>,
    pub epsilon_bound: Option<f64>,
    pub n_states_sampled: usize,
    /// How the state expectation was approximated.
    pub estimator: String,
}

/// Alignment statistics over the first `rows` steps of `batch`. With `newer`,
/// also the improvement bound from `params` (old) to `newer`.
pub fn alignment_report(model: &Model, params: &Params, batch: &Batch, rows: usize, newer: Option<&Params>, gamma: f64) -> Result<AlignmentReport> {
    let rows = rows.min(batch.len());
    let views = step_views(model, params, batch, rows);
    let mut gap_sum = 0.0;
    let mut gap_max: f64 = 0.0;
    let mut violations = 0usize;
    for v in &views {
        let local: Vec<usize> = v.policies.iter().map(PolicyDistribution::argmax).collect();
        let gap = q_gap_for_actions(&model.mixer, &params.theta, &v.q_vectors, &v.state, &local)?;
        gap_sum += gap;
        gap_max = gap_max.max(gap);
        if igm_violated(&model.mixer, &params.theta, &v.q_vectors, &v.state)? {
            violations += 1;
        }
    }
    let sub = batch_prefix(batch, rows);
    let dq = delta_q(model, params, &sub);
    let (kl, eps) = match newer {
        Some(new) => {
            let (term, kl) = bound_terms(model, params, new, batch, rows)?;
            (Some(kl), Some(term * gamma / (1.0 - gamma)))
        }
        None => (None, None),
    };
    let denom = rows.max(1) as f64;
    Ok(AlignmentReport {
        q_gap_mean: gap_sum / denom,
        q_gap_max: gap_max,
        igm_violation_rate: violations as f64 / denom,
        delta_q_mean: dq.mean,
        delta_q_max: dq.max,
        kl_old_new_mean: kl,
        epsilon_bound: eps,
        n_states_sampled: rows,
        estimator: "states visited by rollouts of the evaluated policy".into(),
    })
}

/// The first `rows` steps of a batch as a batch of their own.
fn batch_prefix(batch: &Batch, rows: usize) -> Batch {
    let n = batch.n_agents;
    let mut episodes = Vec::new();
    for r in &batch.episodes {
        if r.start >= rows {
            break;
        }
        episodes.push(r.start..r.end.min(rows));
    }
    Batch {
        inputs: batch.inputs.slice(s![..rows * n, ..]).to_owned(),
        states: batch.states.slice(s![..rows, ..]).to_owned(),
        actions: batch.actions[..rows * n].to_vec(),
        rewards: batch.rewards[..rows].to_vec(),
        dones: batch.dones[..rows].to_vec(),
        log_pi_jt: batch.log_pi_jt[..rows].to_vec(),
        episodes,
        n_agents: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvConfig;
    use crate::learner::{run_episode, ActMode, Algo, ModelConfig, TrainConfig};
    use crate::mixer::{MixerConfig, MixerKind};
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn dist(p: &[f64]) -> PolicyDistribution {
        PolicyDistribution {
            probs: p.to_vec(),
            log_probs: p.iter().map(|x| x.ln()).collect(),
        }
    }

    fn setup(algo: Algo, env: &str, seed: u64) -> (Model, Params, Batch) {
        let env_cfg = EnvConfig::by_name(env).unwrap();
        let mut e = env_cfg.build().unwrap();
        let mut mc = ModelConfig::for_env(algo, env);
        mc.hidden_dims = vec![16];
        let model = Model::new(&mc, e.spec()).unwrap();
        let params = model.init_params(&TrainConfig { seed, ..Default::default() }).unwrap();
        let mut rng = stream(seed, Stream::Act);
        let eps: Vec<_> = (0..3)
            .map(|_| {
                let r = rng.gen();
                run_episode(&model, &params, e.as_mut(), &mut rng, ActMode::Stochastic { epsilon: 0.3 }, r).unwrap()
            })
            .collect();
        let refs: Vec<_> = eps.iter().collect();
        let batch = Batch::from_episodes(&model, &refs).unwrap();
        (model, params, batch)
    }

    #[test]
    fn kl_matches_hand_computation() {
        let p = [dist(&[0.5, 0.5]), dist(&[0.9, 0.1])];
        let q = [dist(&[0.25, 0.75]), dist(&[0.5, 0.5])];
        // independent factors: KL adds across agents
        let k1 = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let k2 = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((joint_kl(&p, &q).unwrap() - (k1 + k2)).abs() < 1e-12);
        assert_eq!(joint_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn gap_under_additive_mixing() {
        let cfg = MixerConfig {
            kind: MixerKind::Vdn,
            ..Default::default()
        };
        let mixer = Mixer::new(&cfg, 2, 1).unwrap();
        let store = ParamStore::new();
        let qs = [QVector(vec![1.0, 3.0]), QVector(vec![2.0, 0.0])];
        assert_eq!(q_gap_for_actions(&mixer, &store, &qs, &[0.0], &[0, 0]).unwrap(), 2.0);
        assert_eq!(q_gap_for_actions(&mixer, &store, &qs, &[0.0], &[1, 0]).unwrap(), 0.0);
        assert!(!igm_violated(&mixer, &store, &qs, &[0.0]).unwrap());
    }

    #[test]
    fn opt_policies_are_aligned_at_init() {
        for algo in [Algo::MeQmix, Algo::MeVdn] {
            for seed in 0..3 {
                let (model, params, batch) = setup(algo, "gridworld", seed);
                let r = alignment_report(&model, &params, &batch, 1000, None, 0.99).unwrap();
                assert_eq!(r.q_gap_max, 0.0);
                assert_eq!(r.igm_violation_rate, 0.0);
                assert_eq!(r.n_states_sampled, batch.len());
                assert!(r.epsilon_bound.is_none());
            }
        }
    }

    #[test]
    fn identical_parameters_give_zero_bound() {
        let (model, params, batch) = setup(Algo::MeQmix, "gridworld", 4);
        let r = alignment_report(&model, &params, &batch, 50, Some(&params), 0.99).unwrap();
        assert_eq!(r.epsilon_bound, Some(0.0));
        assert_eq!(r.kl_old_new_mean, Some(0.0));
    }

    #[test]
    fn bound_grows_with_policy_change() {
        let (model, old, batch) = setup(Algo::MeQmix, "matrix", 5);
        let mut new = old.clone();
        for (_, p) in new.phi.iter_mut() {
            p.values.iter_mut().for_each(|v| *v *= 1.5);
        }
        let b = improvement_bound(&model, &old, &new, &batch, 10, 0.99).unwrap();
        assert!(b > 0.0 && b.is_finite());
        let b_short = improvement_bound(&model, &old, &new, &batch, 10, 0.5).unwrap();
        assert!((b / b_short - (0.99 / 0.01) / 1.0).abs() < 1e-9);
    }

    #[test]
    fn delta_q_without_head_is_exact_for_vdn() {
        let (model, params, batch) = setup(Algo::Vdn, "matrix", 6);
        let d = delta_q(&model, &params, &batch);
        assert!(d.max < 1e-12);
        let (model, params, batch) = setup(Algo::MeQmixNoopt, "matrix", 6);
        let d = delta_q(&model, &params, &batch);
        assert!(d.mean > 0.0 && d.mean <= d.max);
    }
}
