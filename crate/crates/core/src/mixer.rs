//! Credit-assignment mixers that satisfy IGM: the QMIX monotonic mixer whose
//! weights are emitted by state-conditioned hyper-networks, and VDN's sum.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agentnet::QVector;
use crate::diffmath::{elu_grad, elu_scalar, Mlp, MlpCache, ParamStore};
use crate::{Error, Result};

/// Largest joint action space [`Mixer::argmax_joint`] will enumerate.
pub const JOINT_ENUMERATION_LIMIT: usize = 10_000;

/// State-conditioned affine layer `{W, b}` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperLayer {
    pub w: Array2<f64>,
    pub b: Vec<f64>,
    pub nonneg: bool,
}

/// State → flat parameter vector. With `nonneg`, outputs pass through
/// `|·| + floor` so the generated weights can never be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperHead {
    mlp: Mlp,
    nonneg: bool,
    floor: f64,
}

#[derive(Debug, Clone)]
pub struct HyperCache {
    raw: Array2<f64>,
    mlp: MlpCache,
}

impl HyperHead {
    /// `layers == 1` is a single linear map; `layers == 2` adds an ELU hidden
    /// layer of width `embed`.
    pub fn new(prefix: &str, state_dim: usize, embed: usize, out: usize, layers: usize, nonneg: bool, floor: f64) -> Self {
        let dims: Vec<usize> = if layers >= 2 {
            vec![state_dim, embed, out]
        } else {
            vec![state_dim, out]
        };
        HyperHead {
            mlp: Mlp::new(prefix, &dims),
            nonneg,
            floor,
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.mlp.register(store, rng)
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    fn transform(&self, mut raw: Array2<f64>) -> Array2<f64> {
        if self.nonneg {
            let floor = self.floor;
            raw.mapv_inplace(|v| v.abs() + floor);
        }
        raw
    }

    pub fn infer(&self, store: &ParamStore, states: ArrayView2<'_, f64>) -> Array2<f64> {
        crate::policy::record_state_read();
        self.transform(self.mlp.infer(store, states))
    }

    pub fn forward(&self, store: &ParamStore, states: ArrayView2<'_, f64>) -> (Array2<f64>, HyperCache) {
        crate::policy::record_state_read();
        let (raw, mlp) = self.mlp.forward(store, states);
        let out = self.transform(raw.clone());
        (out, HyperCache { raw, mlp })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &HyperCache, mut dout: Array2<f64>) {
        if self.nonneg {
            ndarray::Zip::from(&mut dout)
                .and(&cache.raw)
                .for_each(|d, &r| {
                    if r < 0.0 {
                        *d = -*d;
                    }
                });
        }
        self.mlp.backward(store, &cache.mlp, dout.view());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Qmix,
    Vdn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub mixing_embed_dim: usize,
    pub hypernet_embed_dim: usize,
    /// Depth of the weight-generating hyper-networks (1 or 2).
    pub num_layers: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            kind: MixerKind::Qmix,
            mixing_embed_dim: 32,
            hypernet_embed_dim: 64,
            num_layers: 2,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixing_embed_dim == 0 || self.hypernet_embed_dim == 0 {
            return Err(Error::Config("mixer dims must be positive".into()));
        }
        if !(1..=2).contains(&self.num_layers) {
            return Err(Error::Config("mixer num_layers must be 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmixMixer {
    n_agents: usize,
    embed: usize,
    hyper_w1: HyperHead,
    hyper_b1: HyperHead,
    hyper_w2: HyperHead,
    hyper_b2: HyperHead,
}

#[derive(Debug, Clone)]
pub struct QmixCache {
    qs: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    c_w1: HyperCache,
    c_b1: HyperCache,
    c_w2: HyperCache,
    c_b2: HyperCache,
}

impl QmixMixer {
    pub fn new(cfg: &MixerConfig, n_agents: usize, state_dim: usize) -> Self {
        let (e, h, l) = (cfg.mixing_embed_dim, cfg.hypernet_embed_dim, cfg.num_layers);
        QmixMixer {
            n_agents,
            embed: e,
            hyper_w1: HyperHead::new("mixer.hyper_w1", state_dim, h, n_agents * e, l, true, 0.0),
            hyper_b1: HyperHead::new("mixer.hyper_b1", state_dim, h, e, 1, false, 0.0),
            hyper_w2: HyperHead::new("mixer.hyper_w2", state_dim, h, e, l, true, 0.0),
            hyper_b2: HyperHead::new("mixer.hyper_b2", state_dim, e, 1, 2, false, 0.0),
        }
    }

    fn heads(&self) -> [&HyperHead; 4] {
        [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2]
    }

    /// Layer 0 is `{W1 (n×E), b1}`, layer 1 is `{W2 (E×1), b2}`.
    pub fn hyper_generate(&self, store: &ParamStore, state: &[f64], layer: usize) -> HyperLayer {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        match layer {
            0 => HyperLayer {
                w: self
                    .hyper_w1
                    .infer(store, s)
                    .into_shape_with_order((self.n_agents, self.embed))
                    .expect("n×E"),
                b: self.hyper_b1.infer(store, s).row(0).to_vec(),
                nonneg: true,
            },
            _ => HyperLayer {
                w: self
                    .hyper_w2
                    .infer(store, s)
                    .into_shape_with_order((self.embed, 1))
                    .expect("E×1"),
                b: self.hyper_b2.infer(store, s).row(0).to_vec(),
                nonneg: true,
            },
        }
    }

    fn mix_rows(&self, qs: ArrayView2<'_, f64>, w1: &Array2<f64>, b1: &Array2<f64>, w2: &Array2<f64>, b2: &Array2<f64>) -> (Array1<f64>, Array2<f64>, Array2<f64>) {
        let (bsz, n, e) = (qs.nrows(), self.n_agents, self.embed);
        let mut pre = b1.clone();
        let mut hidden = Array2::zeros((bsz, e));
        let mut out = Array1::zeros(bsz);
        for b in 0..bsz {
            let w1r = w1.row(b);
            let mut pre_r = pre.row_mut(b);
            for i in 0..n {
                let q = qs[[b, i]];
                for k in 0..e {
                    pre_r[k] += q * w1r[i * e + k];
                }
            }
            let mut acc = b2[[b, 0]];
            for k in 0..e {
                let h = elu_scalar(pre_r[k]);
                hidden[[b, k]] = h;
                acc += h * w2[[b, k]];
            }
            out[b] = acc;
        }
        (out, pre, hidden)
    }

    pub fn infer(&self, store: &ParamStore, qs: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> Array1<f64> {
        let w1 = self.hyper_w1.infer(store, states);
        let b1 = self.hyper_b1.infer(store, states);
        let w2 = self.hyper_w2.infer(store, states);
        let b2 = self.hyper_b2.infer(store, states);
        self.mix_rows(qs, &w1, &b1, &w2, &b2).0
    }

    pub fn forward(&self, store: &ParamStore, qs: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> (Array1<f64>, QmixCache) {
        let (w1, c_w1) = self.hyper_w1.forward(store, states);
        let (b1, c_b1) = self.hyper_b1.forward(store, states);
        let (w2, c_w2) = self.hyper_w2.forward(store, states);
        let (b2, c_b2) = self.hyper_b2.forward(store, states);
        let (out, pre, hidden) = self.mix_rows(qs, &w1, &b1, &w2, &b2);
        let cache = QmixCache {
            qs: qs.to_owned(),
            w1,
            w2,
            pre,
            hidden,
            c_w1,
            c_b1,
            c_w2,
            c_b2,
        };
        (out, cache)
    }

    /// Accumulates hyper-network gradients and returns `∂L/∂q` (B×n).
    pub fn backward(&self, store: &mut ParamStore, cache: &QmixCache, dout: &[f64]) -> Array2<f64> {
        let (bsz, n, e) = (cache.qs.nrows(), self.n_agents, self.embed);
        let mut d_w1 = Array2::zeros((bsz, n * e));
        let mut d_b1 = Array2::zeros((bsz, e));
        let mut d_w2 = Array2::zeros((bsz, e));
        let mut d_b2 = Array2::zeros((bsz, 1));
        let mut d_qs = Array2::zeros((bsz, n));
        for b in 0..bsz {
            let g = dout[b];
            d_b2[[b, 0]] = g;
            for k in 0..e {
                d_w2[[b, k]] = g * cache.hidden[[b, k]];
                let dpre = g * cache.w2[[b, k]] * elu_grad(cache.pre[[b, k]]);
                d_b1[[b, k]] = dpre;
                for i in 0..n {
                    d_w1[[b, i * e + k]] = cache.qs[[b, i]] * dpre;
                    d_qs[[b, i]] += cache.w1[[b, i * e + k]] * dpre;
                }
            }
        }
        self.hyper_w1.backward(store, &cache.c_w1, d_w1);
        self.hyper_b1.backward(store, &cache.c_b1, d_b1);
        self.hyper_w2.backward(store, &cache.c_w2, d_w2);
        self.hyper_b2.backward(store, &cache.c_b2, d_b2);
        d_qs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Qmix(QmixMixer),
    Vdn { n_agents: usize },
}

#[derive(Debug, Clone)]
pub enum MixerCache {
    Qmix(Box<QmixCache>),
    Vdn { batch: usize },
}

impl Mixer {
    pub fn new(cfg: &MixerConfig, n_agents: usize, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            MixerKind::Qmix => Mixer::Qmix(QmixMixer::new(cfg, n_agents, state_dim)),
            MixerKind::Vdn => Mixer::Vdn { n_agents },
        })
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if let Mixer::Qmix(m) = self {
            for head in m.heads() {
                head.register(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Mixer::Qmix(m) => m.n_agents,
            Mixer::Vdn { n_agents } => *n_agents,
        }
    }

    /// Batched `Q_tot` for chosen per-agent values `qs` (B×n) and states (B×S).
    pub fn infer(&self, store: &ParamStore, qs: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> Array1<f64> {
        match self {
            Mixer::Qmix(m) => m.infer(store, qs, states),
            Mixer::Vdn { .. } => qs.sum_axis(Axis(1)),
        }
    }

    pub fn forward(&self, store: &ParamStore, qs: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>) -> (Array1<f64>, MixerCache) {
        match self {
            Mixer::Qmix(m) => {
                let (out, cache) = m.forward(store, qs, states);
                (out, MixerCache::Qmix(Box::new(cache)))
            }
            Mixer::Vdn { .. } => (qs.sum_axis(Axis(1)), MixerCache::Vdn { batch: qs.nrows() }),
        }
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &MixerCache, dout: &[f64]) -> Array2<f64> {
        match (self, cache) {
            (Mixer::Qmix(m), MixerCache::Qmix(c)) => m.backward(store, c, dout),
            (Mixer::Vdn { n_agents }, MixerCache::Vdn { batch }) => {
                Array2::from_shape_fn((*batch, *n_agents), |(b, _)| dout[b])
            }
            _ => panic!("mixer cache does not match mixer kind"),
        }
    }

    /// `Q_tot` for a single sample.
    pub fn mix(&self, store: &ParamStore, chosen_qs: &[f64], state: &[f64]) -> f64 {
        let qs = ArrayView2::from_shape((1, chosen_qs.len()), chosen_qs).expect("row");
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.infer(store, qs, s)[0]
    }

    /// `Q_tot` of every joint action in lexicographic order (agent 0 most significant).
    pub fn joint_values(&self, store: &ParamStore, q_vectors: &[QVector], state: &[f64]) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
        let joints = enumerate_joint_actions(q_vectors.iter().map(|q| q.0.len()))?;
        let n = q_vectors.len();
        let qs = Array2::from_shape_fn((joints.len(), n), |(j, i)| q_vectors[i].0[joints[j][i]]);
        let states = Array2::from_shape_fn((joints.len(), state.len()), |(_, k)| state[k]);
        let values = self.infer(store, qs.view(), states.view()).to_vec();
        Ok((joints, values))
    }

    /// Brute-force maximizer of `Q_tot`; ties go to the lexicographically first joint action.
    pub fn argmax_joint(&self, store: &ParamStore, q_vectors: &[QVector], state: &[f64]) -> Result<(Vec<usize>, f64)> {
        let (joints, values) = self.joint_values(store, q_vectors, state)?;
        let best = crate::agentnet::greedy_action(&values);
        Ok((joints[best].clone(), values[best]))
    }
}

/// Lexicographic enumeration of the product of per-agent action sets.
pub fn enumerate_joint_actions<I: IntoIterator<Item = usize>>(sizes: I) -> Result<Vec<Vec<usize>>> {
    let sizes: Vec<usize> = sizes.into_iter().collect();
    let total = sizes
        .iter()
        .try_fold(1usize, |acc, s| acc.checked_mul(*s))
        .filter(|t| *t <= JOINT_ENUMERATION_LIMIT)
        .ok_or_else(|| Error::JointSpaceTooLarge {
            size: sizes.iter().fold(1usize, |a, s| a.saturating_mul(*s)),
            limit: JOINT_ENUMERATION_LIMIT,
        })?;
    let mut out = Vec::with_capacity(total);
    let mut cur = vec![0usize; sizes.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for i in (0..sizes.len()).rev() {
            cur[i] += 1;
            if cur[i] < sizes[i] {
                break;
            }
            cur[i] = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{grad_check, Differentiable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qmix(seed: u64, n: usize, sdim: usize) -> (Mixer, ParamStore) {
        let cfg = MixerConfig {
            mixing_embed_dim: 5,
            hypernet_embed_dim: 7,
            ..Default::default()
        };
        let m = Mixer::new(&cfg, n, sdim).unwrap();
        let mut s = ParamStore::new();
        m.register(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (m, s)
    }

    #[test]
    fn vdn_sums() {
        let m = Mixer::new(&MixerConfig { kind: MixerKind::Vdn, ..Default::default() }, 3, 2).unwrap();
        assert_eq!(m.mix(&ParamStore::new(), &[1.0, 2.0, 3.0], &[0.0, 0.0]), 6.0);
    }

    #[test]
    fn zero_hypernets_give_zero() {
        let (m, mut s) = qmix(1, 2, 3);
        for (_, p) in s.iter_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(m.mix(&s, &[3.0, -7.0], &[1.0, 2.0, 3.0]), 0.0);
        if let Mixer::Qmix(q) = &m {
            let l = q.hyper_generate(&s, &[0.5, 0.5, 0.5], 0);
            assert!(l.w.iter().all(|v| *v == 0.0) && l.b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn generated_weights_nonnegative() {
        let (m, s) = qmix(2, 3, 4);
        let Mixer::Qmix(q) = &m else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let st: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for layer in 0..2 {
                let l = q.hyper_generate(&s, &st, layer);
                assert!(l.w.iter().all(|v| *v >= 0.0));
                assert_eq!(l, q.hyper_generate(&s, &st, layer));
            }
        }
    }

    #[test]
    fn joint_enumeration_order_and_size() {
        let j = enumerate_joint_actions([3, 3]).unwrap();
        assert_eq!(j.len(), 9);
        assert_eq!(j[0], vec![0, 0]);
        assert_eq!(j[1], vec![0, 1]);
        assert_eq!(j[8], vec![2, 2]);
        assert!(matches!(enumerate_joint_actions([100, 101]), Err(Error::JointSpaceTooLarge { .. })));
    }

    #[test]
    fn vdn_joint_argmax_is_local_argmax() {
        let m = Mixer::new(&MixerConfig { kind: MixerKind::Vdn, ..Default::default() }, 2, 1).unwrap();
        let qs = [QVector(vec![0.0, 2.0, 1.0]), QVector(vec![5.0, -1.0, 4.0])];
        let (u, v) = m.argmax_joint(&ParamStore::new(), &qs, &[1.0]).unwrap();
        assert_eq!(u, vec![1, 0]);
        assert_eq!(v, 7.0);
    }

    struct MixLoss {
        mixer: Mixer,
        qs: Array2<f64>,
        states: Array2<f64>,
        coef: Vec<f64>,
    }

    impl Differentiable for MixLoss {
        fn loss(&self, s: &ParamStore) -> f64 {
            let y = self.mixer.infer(s, self.qs.view(), self.states.view());
            y.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
        }
        fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
            let (y, c) = self.mixer.forward(s, self.qs.view(), self.states.view());
            self.mixer.backward(s, &c, &self.coef);
            y.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
        }
    }

    #[test]
    fn qmix_gradients_match_finite_differences() {
        let (mixer, mut s) = qmix(5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = MixLoss {
            mixer,
            qs: Array2::from_shape_fn((5, 3), |_| rng.gen_range(-3.0..3.0)),
            states: Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0)),
            coef: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let r = grad_check(&f, &mut s, 1e-4, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (mixer, mut s) = qmix(7, 2, 3);
        let q = [0.7, -1.3];
        let st = [0.2, -0.4, 1.0];
        let (_, c) = mixer.forward(&s, ArrayView2::from_shape((1, 2), &q).unwrap(), ArrayView2::from_shape((1, 3), &st).unwrap());
        let d = mixer.backward(&mut s, &c, &[1.0]);
        for i in 0..2 {
            let (mut p, mut m) = (q, q);
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (mixer.mix(&s, &p, &st) - mixer.mix(&s, &m, &st)) / 2e-5;
            assert!((fd - d[[0, i]]).abs() < 1e-7 * (1.0 + fd.abs()));
            assert!(d[[0, i]] >= 0.0);
        }
    }
}
