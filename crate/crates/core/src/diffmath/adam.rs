use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far (drives bias correction).
    pub step_count: u64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update over every entry of `store`; grads are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, cfg: &mut AdamConfig) {
    cfg.step_count += 1;
    let t = cfg.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (_, p) in store.iter_mut() {
        for i in 0..p.values.len() {
            let g = p.grad[i];
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            p.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p.grad[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", &[1], vec![v]).unwrap();
        s.accumulate_grad("w", &[g]);
        s
    }

    #[test]
    fn first_step_closed_form() {
        for g in [0.37, -2.5, 1e-3] {
            let mut s = one(1.0, g);
            let mut cfg = AdamConfig::new(0.01);
            adam_step(&mut s, &mut cfg);
            let expect = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.values("w")[0] - expect).abs() < 1e-15);
            assert_eq!(s.grad("w"), &[0.0]);
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = one(0.25, 0.0);
        let mut cfg = AdamConfig::new(0.1);
        for _ in 0..5 {
            adam_step(&mut s, &mut cfg);
        }
        assert_eq!(s.values("w"), &[0.25]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = one(0.5, 0.0);
            let mut cfg = AdamConfig::new(0.05);
            for k in 0..20 {
                s.accumulate_grad("w", &[(k as f64).sin()]);
                adam_step(&mut s, &mut cfg);
            }
            s.values("w")[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
