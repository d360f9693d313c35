use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::ops::{elu_grad, elu_scalar};
use super::params::ParamStore;
use crate::Result;

/// Affine layer whose weight `[in, out]` and bias `[out]` live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            in_dim,
            out_dim,
        }
    }

    /// PyTorch-style U(-1/√in, 1/√in) for both weight and bias.
    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        store.insert_uniform(&self.weight, &[self.in_dim, self.out_dim], bound, rng)?;
        store.insert_uniform(&self.bias, &[self.out_dim], bound, rng)
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&store.matrix(&self.weight));
        y += &store.vector(&self.bias).insert_axis(Axis(0));
        y
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let dw = x.t().dot(&dy);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&store.matrix(&self.weight).t());
        store.accumulate_grad(&self.weight, dw.iter());
        store.accumulate_grad(&self.bias, db.iter());
        dx
    }
}

/// Stack of dense layers with ELU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    preacts: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; needs at least two entries.
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(&format!("{prefix}.l{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for layer in &self.layers {
            layer.register(store, rng)?;
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// Forward pass without keeping intermediates.
    pub fn infer(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(store, x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(elu_scalar);
            h = layer.forward(store, h.view());
        }
        h
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(store, h.view());
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = z.mapv(elu_scalar);
                preacts.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, preacts })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        dout: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let mut d = dout.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                Zip::from(&mut d)
                    .and(&cache.preacts[i])
                    .for_each(|g, &z| *g *= elu_grad(z));
            }
            d = self.layers[i].backward(store, cache.inputs[i].view(), d.view());
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::gradcheck::{grad_check, Differentiable};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct MlpLoss {
        mlp: Mlp,
        x: Array2<f64>,
        weights: Array2<f64>,
    }

    impl Differentiable for MlpLoss {
        fn loss(&self, store: &ParamStore) -> f64 {
            (self.mlp.infer(store, self.x.view()) * &self.weights).sum()
        }
        fn loss_and_grad(&self, store: &mut ParamStore) -> f64 {
            let (y, cache) = self.mlp.forward(store, self.x.view());
            self.mlp.backward(store, &cache, self.weights.view());
            (y * &self.weights).sum()
        }
    }

    fn fixture(seed: u64) -> (MlpLoss, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new("m", &[3, 5, 4, 2]);
        let mut store = ParamStore::new();
        mlp.register(&mut store, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-2.0..2.0));
        let weights = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        (MlpLoss { mlp, x, weights }, store)
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let (f, mut store) = fixture(3);
        let report = grad_check(&f, &mut store, 1e-4, 1e-5).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn forward_and_infer_agree() {
        let (f, store) = fixture(4);
        let (a, _) = f.mlp.forward(&store, f.x.view());
        assert_eq!(a, f.mlp.infer(&store, f.x.view()));
    }

    #[test]
    fn square_loss_gradient() {
        // loss = w², w = 3 → grad 6
        struct Sq;
        impl Differentiable for Sq {
            fn loss(&self, s: &ParamStore) -> f64 {
                s.values("w")[0].powi(2)
            }
            fn loss_and_grad(&self, s: &mut ParamStore) -> f64 {
                let w = s.values("w")[0];
                s.accumulate_grad("w", &[2.0 * w]);
                w * w
            }
        }
        let mut s = ParamStore::new();
        s.insert("w", &[1], vec![3.0]).unwrap();
        Sq.loss_and_grad(&mut s);
        assert_eq!(s.grad("w"), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let (f, mut store) = fixture(5);
        let zero = MlpLoss {
            weights: Array2::zeros(f.weights.dim()),
            ..f
        };
        zero.loss_and_grad(&mut store);
        assert!(store.iter().all(|(_, p)| p.grad.iter().all(|g| *g == 0.0)));
    }
}
