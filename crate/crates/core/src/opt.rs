//! Order-preserving transformation (OPT) from local Q-values to policy logits.
//!
//! For a Q-vector `x` (one entry per action) and global state `s`:
//!
//! ```text
//! OPT(x, s)_a = Σ_j W²_j · ELU(W¹_j · x_a + b¹_j) + b²
//! ```
//!
//! where `W¹, b¹, W², b²` (each of width `d1`, `b²` scalar) are emitted per state by
//! hyper-networks. `W¹` and `W²` pass through `|·| + STRICTNESS_FLOOR`, so the map is
//! strictly increasing in each `x_a` and the ranking of actions (in particular the
//! argmax) survives. The single-layer form is `w · x_a + b` with `w ≥ STRICTNESS_FLOOR`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{elu_grad, elu_scalar, ParamStore};
use crate::mixer::{HyperCache, HyperHead};
use crate::{Error, Result};

/// Added to every generated OPT weight after the absolute value.
pub const STRICTNESS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub d1: usize,
    /// 2 for the ELU form, 1 for the affine form.
    pub num_layers: usize,
    pub hypernet_embed_dim: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            d1: 32,
            num_layers: 2,
            hypernet_embed_dim: 64,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.hypernet_embed_dim == 0 {
            return Err(Error::Config("OPT dims must be positive".into()));
        }
        if !(1..=2).contains(&self.num_layers) {
            return Err(Error::Config("OPT num_layers must be 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Form {
    Two {
        w1: HyperHead,
        b1: HyperHead,
        w2: HyperHead,
        b2: HyperHead,
    },
    One {
        w: HyperHead,
        b: HyperHead,
    },
}

/// One agent's OPT with its own hyper-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Opt {
    d1: usize,
    form: Form,
}

#[derive(Debug, Clone)]
pub struct OptCache {
    x: Array2<f64>,
    weights: Vec<Array2<f64>>,
    /// `pre[b, a * d1 + j]`, two-layer form only.
    pre: Array2<f64>,
    heads: Vec<HyperCache>,
}

impl Opt {
    pub fn new(cfg: &OptConfig, agent: usize, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let p = format!("opt{agent}");
        let (d1, h) = (cfg.d1, cfg.hypernet_embed_dim);
        let form = if cfg.num_layers == 2 {
            Form::Two {
                w1: HyperHead::new(&format!("{p}.hyper_w1"), state_dim, h, d1, 2, true, STRICTNESS_FLOOR),
                b1: HyperHead::new(&format!("{p}.hyper_b1"), state_dim, h, d1, 1, false, 0.0),
                w2: HyperHead::new(&format!("{p}.hyper_w2"), state_dim, h, d1, 2, true, STRICTNESS_FLOOR),
                b2: HyperHead::new(&format!("{p}.hyper_b2"), state_dim, h, 1, 2, false, 0.0),
            }
        } else {
            Form::One {
                w: HyperHead::new(&format!("{p}.hyper_w"), state_dim, h, 1, 2, true, STRICTNESS_FLOOR),
                b: HyperHead::new(&format!("{p}.hyper_b"), state_dim, h, 1, 2, false, 0.0),
            }
        };
        Ok(Opt { d1, form })
    }

    fn heads(&self) -> Vec<&HyperHead> {
        match &self.form {
            Form::Two { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            Form::One { w, b } => vec![w, b],
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for h in self.heads() {
            h.register(store, rng)?;
        }
        Ok(())
    }

    /// Generated `(W¹, b¹, W², b²)` for one state; the affine form reports `(w, b)` as `W¹, b¹`.
    pub fn generate(&self, store: &ParamStore, state: &[f64]) -> Vec<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.heads()
            .iter()
            .map(|h| h.infer(store, s).row(0).to_vec())
            .collect()
    }

    fn apply_rows(&self, x: ArrayView2<'_, f64>, weights: &[Array2<f64>]) -> (Array2<f64>, Array2<f64>) {
        let (bsz, d2) = x.dim();
        let mut out = Array2::zeros((bsz, d2));
        match self.form {
            Form::Two { .. } => {
                let d1 = self.d1;
                let (w1, b1, w2, b2) = (&weights[0], &weights[1], &weights[2], &weights[3]);
                let mut pre = Array2::zeros((bsz, d2 * d1));
                for b in 0..bsz {
                    for a in 0..d2 {
                        let xa = x[[b, a]];
                        let mut acc = b2[[b, 0]];
                        for j in 0..d1 {
                            let z = w1[[b, j]] * xa + b1[[b, j]];
                            pre[[b, a * d1 + j]] = z;
                            acc += w2[[b, j]] * elu_scalar(z);
                        }
                        out[[b, a]] = acc;
                    }
                }
                (out, pre)
            }
            Form::One { .. } => {
                let (w, bias) = (&weights[0], &weights[1]);
                for b in 0..bsz {
                    for a in 0..d2 {
                        out[[b, a]] = w[[b, 0]] * x[[b, a]] + bias[[b, 0]];
                    }
                }
                (out, Array2::zeros((0, 0)))
            }
        }
    }

    /// Batched OPT: `x` is B×d2 (any d2), `states` is B×S.
    pub fn infer(&self, store: &ParamStore, x: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> Array2<f64> {
        let weights: Vec<Array2<f64>> = self.heads().iter().map(|h| h.infer(store, states)).collect();
        self.apply_rows(x, &weights).0
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> (Array2<f64>, OptCache) {
        let (weights, heads): (Vec<_>, Vec<_>) = self.heads().iter().map(|h| h.forward(store, states)).unzip();
        let (out, pre) = self.apply_rows(x, &weights);
        (
            out,
            OptCache {
                x: x.to_owned(),
                weights,
                pre,
                heads,
            },
        )
    }

    /// Accumulates hyper-network gradients and returns `∂L/∂x`.
    pub fn backward(&self, store: &mut ParamStore, cache: &OptCache, dout: ArrayView2<'_, f64>) -> Array2<f64> {
        let (bsz, d2) = cache.x.dim();
        let mut dx = Array2::zeros((bsz, d2));
        match &self.form {
            Form::Two { w1, b1, w2, b2 } => {
                let d1 = self.d1;
                let (cw1, cw2) = (&cache.weights[0], &cache.weights[2]);
                let mut d_w1 = Array2::zeros((bsz, d1));
                let mut d_b1 = Array2::zeros((bsz, d1));
                let mut d_w2 = Array2::zeros((bsz, d1));
                let mut d_b2 = Array2::zeros((bsz, 1));
                for b in 0..bsz {
                    for a in 0..d2 {
                        let g = dout[[b, a]];
                        if g == 0.0 {
                            continue;
                        }
                        d_b2[[b, 0]] += g;
                        let xa = cache.x[[b, a]];
                        for j in 0..d1 {
                            let z = cache.pre[[b, a * d1 + j]];
                            d_w2[[b, j]] += g * elu_scalar(z);
                            let dz = g * cw2[[b, j]] * elu_grad(z);
                            d_w1[[b, j]] += dz * xa;
                            d_b1[[b, j]] += dz;
                            dx[[b, a]] += dz * cw1[[b, j]];
                        }
                    }
                }
                w1.backward(store, &cache.heads[0], d_w1);
                b1.backward(store, &cache.heads[1], d_b1);
                w2.backward(store, &cache.heads[2], d_w2);
                b2.backward(store, &cache.heads[3], d_b2);
            }
            Form::One { w, b } => {
                let cw = &cache.weights[0];
                let mut d_w = Array2::zeros((bsz, 1));
                let mut d_b = Array2::zeros((bsz, 1));
                for r in 0..bsz {
                    for a in 0..d2 {
                        let g = dout[[r, a]];
                        d_w[[r, 0]] += g * cache.x[[r, a]];
                        d_b[[r, 0]] += g;
                        dx[[r, a]] = g * cw[[r, 0]];
                    }
                }
                w.backward(store, &cache.heads[0], d_w);
                b.backward(store, &cache.heads[1], d_b);
            }
        }
        dx
    }

    /// Logits for one Q-vector under one state.
    pub fn apply(&self, store: &ParamStore, q: &[f64], state: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, q.len()), q).expect("row");
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.infer(store, x, s).row(0).to_vec()
    }
}

/// One OPT per agent; no parameter sharing between agents.
#[derive(Debug, Clone, PartialEq)]
pub struct OptSet {
    opts: Vec<Opt>,
}

impl OptSet {
    pub fn new(cfg: &OptConfig, n_agents: usize, state_dim: usize) -> Result<Self> {
        let opts = (0..n_agents)
            .map(|i| Opt::new(cfg, i, state_dim))
            .collect::<Result<_>>()?;
        Ok(OptSet { opts })
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for o in &self.opts {
            o.register(store, rng)?;
        }
        Ok(())
    }

    pub fn agent(&self, i: usize) -> &Opt {
        &self.opts[i]
    }

    pub fn len(&self) -> usize {
        self.opts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opts.is_empty()
    }

    pub fn opt_apply(&self, store: &ParamStore, agent: usize, q: &[f64], state: &[f64]) -> Vec<f64> {
        self.opts[agent].apply(store, q, state)
    }

    /// `Σ_i OPT_i(q_i[u_i], s)` for the chosen per-agent values.
    pub fn opt_sum(&self, store: &ParamStore, chosen: &[f64], state: &[f64]) -> f64 {
        chosen
            .iter()
            .enumerate()
            .map(|(i, q)| self.opts[i].apply(store, &[*q], state)[0])
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, Differentiable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opt(layers: usize, seed: u64) -> (Opt, ParamStore) {
        let cfg = OptConfig {
            d1: 6,
            num_layers: layers,
            hypernet_embed_dim: 5,
        };
        let o = Opt::new(&cfg, 0, 3).unwrap();
        let mut s = ParamStore::new();
        o.register(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (o, s)
    }

    /// Overwrites the hyper-nets so they emit W¹=[1], b¹=0, W²=[1], b²=0 (up to the floor).
    fn identity_config() -> (Opt, ParamStore) {
        let cfg = OptConfig {
            d1: 1,
            num_layers: 2,
            hypernet_embed_dim: 2,
        };
        let o = Opt::new(&cfg, 0, 1).unwrap();
        let mut s = ParamStore::new();
        o.register(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            s.values_mut(&n).iter_mut().for_each(|v| *v = 0.0);
        }
        // final bias of each weight head = 1 - floor, so |1 - floor| + floor = 1
        s.values_mut("opt0.hyper_w1.l1.b")[0] = 1.0 - STRICTNESS_FLOOR;
        s.values_mut("opt0.hyper_w2.l1.b")[0] = 1.0 - STRICTNESS_FLOOR;
        (o, s)
    }

    #[test]
    fn identity_configuration() {
        let (o, s) = identity_config();
        let y = o.apply(&s, &[0.5, 2.0], &[1.0]);
        assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 2.0).abs() < 1e-15, "{y:?}");
    }

    #[test]
    fn opt_sum_identity_and_zero() {
        let cfg = OptConfig {
            d1: 1,
            num_layers: 2,
            hypernet_embed_dim: 2,
        };
        let set = OptSet::new(&cfg, 2, 1).unwrap();
        let (_, single) = identity_config();
        let mut s = ParamStore::new();
        s.merge_prefixed("", &single).unwrap();
        s.merge_prefixed("", &{
            let mut other = ParamStore::new();
            for (n, p) in single.iter() {
                other.insert(&n.replacen("opt0", "opt1", 1), p.shape(), p.values.clone()).unwrap();
            }
            other
        })
        .unwrap();
        assert!((set.opt_sum(&s, &[1.0, 2.0], &[1.0]) - 3.0).abs() < 1e-15);

        let zero = OptSet::new(&OptConfig::default(), 2, 3).unwrap();
        let mut zs = ParamStore::new();
        zero.register(&mut zs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let names: Vec<String> = zs.names().map(str::to_string).collect();
        for n in names {
            zs.values_mut(&n).iter_mut().for_each(|v| *v = 0.0);
        }
        // only the strictness floor survives; with ELU(0·x)=... the sum is within floor scale of 0
        assert!(zero.opt_sum(&zs, &[3.0, -1.0], &[0.0; 3]).abs() < 1e-9);
    }

    #[test]
    fn preserves_argsort_example() {
        for layers in [1, 2] {
            let (o, s) = opt(layers, 9);
            let y = o.apply(&s, &[3.0, 1.0, 2.0], &[0.1, 0.2, 0.3]);
            let mut idx = vec![0, 1, 2];
            idx.sort_by(|a, b| y[*a].partial_cmp(&y[*b]).unwrap());
            assert_eq!(idx, vec![1, 2, 0]);
        }
    }

    #[test]
    fn matches_direct_evaluation() {
        let (o, s) = opt(2, 4);
        let state = [0.3, -1.0, 0.5];
        let x = [1.5, -0.7, 0.2, 4.0];
        let y = o.apply(&s, &x, &state);
        // rebuild each head by hand
        let head = |p: &str, two: bool| -> Vec<f64> {
            let lin = |inp: &[f64], name: &str| -> Vec<f64> {
                let w = s.matrix(&format!("{name}.w"));
                let b = s.values(&format!("{name}.b"));
                (0..w.ncols())
                    .map(|j| b[j] + (0..w.nrows()).map(|i| inp[i] * w[[i, j]]).sum::<f64>())
                    .collect()
            };
            if two {
                let h: Vec<f64> = lin(&state, &format!("{p}.l0")).into_iter().map(|v| if v >= 0.0 { v } else { v.exp() - 1.0 }).collect();
                lin(&h, &format!("{p}.l1"))
            } else {
                lin(&state, &format!("{p}.l0"))
            }
        };
        let w1: Vec<f64> = head("opt0.hyper_w1", true).iter().map(|v| v.abs() + STRICTNESS_FLOOR).collect();
        let b1 = head("opt0.hyper_b1", false);
        let w2: Vec<f64> = head("opt0.hyper_w2", true).iter().map(|v| v.abs() + STRICTNESS_FLOOR).collect();
        let b2 = head("opt0.hyper_b2", true)[0];
        for (a, xa) in x.iter().enumerate() {
            let mut acc = b2;
            for j in 0..6 {
                let z = w1[j] * xa + b1[j];
                acc += w2[j] * if z >= 0.0 { z } else { z.exp() - 1.0 };
            }
            assert!((acc - y[a]).abs() < 1e-12);
        }
    }

    struct OptLoss {
        opt: Opt,
        x: Array2<f64>,
        states: Array2<f64>,
        coef: Array2<f64>,
    }

    impl Differentiable for OptLoss {
        fn loss(&self, s: &ParamStore) -> f64 {
            (self.opt.infer(s, self.x.view(), self.states.view()) * &self.coef).sum()
        }
        fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
            let (y, c) = self.opt.forward(s, self.x.view(), self.states.view());
            self.opt.backward(s, &c, self.coef.view());
            (y * &self.coef).sum()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for layers in [1, 2] {
            let (opt, mut s) = opt(layers, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let f = OptLoss {
                opt,
                x: Array2::from_shape_fn((4, 3), |_| rng.gen_range(-3.0..3.0)),
                states: Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0)),
                coef: Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0)),
            };
            let r = grad_check(&f, &mut s, 1e-4, 1e-5).unwrap();
            assert!(r.pass, "{layers}: {r:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let (o, mut s) = opt(2, 21);
        let x = Array2::from_shape_vec((1, 3), vec![0.4, -1.2, 2.0]).unwrap();
        let st = Array2::from_shape_vec((1, 3), vec![0.2, 0.1, -0.3]).unwrap();
        let coef = Array2::from_shape_vec((1, 3), vec![1.0, -0.5, 0.25]).unwrap();
        let (_, c) = o.forward(&s, x.view(), st.view());
        let dx = o.backward(&mut s, &c, coef.view());
        let h = 1e-6;
        for a in 0..3 {
            let mut xp = x.clone();
            xp[[0, a]] += h;
            let mut xm = x.clone();
            xm[[0, a]] -= h;
            let fd = ((o.infer(&s, xp.view(), st.view()) - o.infer(&s, xm.view(), st.view())) * &coef).sum() / (2.0 * h);
            assert!((fd - dx[[0, a]]).abs() < 1e-6);
            assert!(dx[[0, a]] * coef[[0, a]] > 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn ranking_is_preserved(
            seed in 0u64..500,
            layers in 1usize..=2,
            x in proptest::collection::vec(-20.0f64..20.0, 2..8),
            state in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let (o, s) = opt(layers, seed);
            let y = o.apply(&s, &x, &state);
            for a in 0..x.len() {
                for b in 0..x.len() {
                    if x[a] > x[b] {
                        proptest::prop_assert!(y[a] > y[b], "{:?} -> {:?}", x, y);
                    }
                }
            }
        }
    }
}
