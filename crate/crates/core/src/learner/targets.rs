/// Soft state value of the successor: `Q⁻_tot(s', u') − α log π_jt(u'|s')`,
/// or 0 past a terminal step.
pub fn soft_value(q_target_next: f64, log_pi_jt_next: f64, alpha: f64, terminal: bool) -> f64 {
    if terminal {
        0.0
    } else {
        q_target_next - alpha * log_pi_jt_next
    }
}

/// Entropy-corrected TD(λ) targets for one episode.
///
/// `q_target[t]` is `Q⁻_tot(s_t, u_t)` and `log_pi_jt[t]` the stored joint
/// log-probability of `u_t`. Computed backwards as
/// `G_t = r_t + γ (V_{t+1} + λ (G_{t+1} − Q⁻_{t+1}))`, which equals
/// `Q⁻_t + Σ_l (γλ)^l δ_{t+l}` with `δ_t = r_t + γ V_{t+1} − Q⁻_t`.
/// A step with `done` set (or the last step) does not bootstrap.
pub fn td_lambda_targets(
    rewards: &[f64],
    q_target: &[f64],
    log_pi_jt: &[f64],
    dones: &[bool],
    alpha: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    assert!(q_target.len() == n && log_pi_jt.len() == n && dones.len() == n);
    let mut out = vec![0.0; n];
    for t in (0..n).rev() {
        let terminal = dones[t] || t + 1 == n;
        out[t] = if terminal {
            rewards[t]
        } else {
            let v = soft_value(q_target[t + 1], log_pi_jt[t + 1], alpha, false);
            rewards[t] + gamma * (v + lambda * (out[t + 1] - q_target[t + 1]))
        };
    }
    out
}
