use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::{Error, Result};

/// `x·W + b` with rows as batch entries.
pub fn dense_forward(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "x is {:?} but W is {:?}",
            x.dim(),
            w.dim()
        )));
    }
    if b.len() != w.ncols() {
        return Err(Error::Shape(format!(
            "bias has {} entries, W has {} columns",
            b.len(),
            w.ncols()
        )));
    }
    let mut out = x.dot(&w);
    out += &b.insert_axis(Axis(0));
    Ok(out)
}

#[inline]
pub fn elu_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of ELU evaluated at the pre-activation.
#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn elu(x: &[f64]) -> Vec<f64> {
    x.iter().copied().map(elu_scalar).collect()
}

/// Max-shifted softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| (l - max) / temperature).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.iter().map(|s| s - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_identity_and_scalar() {
        let y = dense_forward(
            array![[1.0, 2.0]].view(),
            array![[1.0, 0.0], [0.0, 1.0]].view(),
            array![0.0, 0.0].view(),
        )
        .unwrap();
        assert_eq!(y, array![[1.0, 2.0]]);
        let y = dense_forward(array![[1.0]].view(), array![[2.0]].view(), array![3.0].view()).unwrap();
        assert_eq!(y, array![[5.0]]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let y = dense_forward(x.view(), w.view(), b.view()).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = b[j];
                for k in 0..3 {
                    acc += x[[i, k]] * w[[k, j]];
                }
                assert!((y[[i, j]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_rejects_bad_shapes() {
        let r = dense_forward(
            array![[1.0, 2.0]].view(),
            array![[1.0, 0.0]].view(),
            array![0.0, 0.0].view(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu_scalar(0.0), 0.0);
        assert_eq!(elu_scalar(2.0), 2.0);
        assert!((elu_scalar(-1.0) - (std::f64::consts::E.recip() - 1.0)).abs() < 1e-15);
        assert!((elu_scalar(-1.0) + 0.632_120_558_828_557_7).abs() < 1e-15);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);

        // [1,2,3] at T=0.5: exp(2), exp(4), exp(6) normalized
        let p = softmax(&[1.0, 2.0, 3.0], 0.5);
        let z = 2f64.exp() + 4f64.exp() + 6f64.exp();
        let expect = [2f64.exp() / z, 4f64.exp() / z, 6f64.exp() / z];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_consistent() {
        let l = [0.3, -2.0, 5.5, 1e6];
        let p = softmax(&l, 0.7);
        let lp = log_softmax(&l, 0.7);
        for (a, b) in p.iter().zip(&lp) {
            if *a > 1e-300 {
                assert!((a.ln() - b).abs() < 1e-9);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_distribution(
            logits in proptest::collection::vec(-1e6f64..1e6, 1..8),
            t in 1e-3f64..1e3,
        ) {
            let p = softmax(&logits, t);
            let s: f64 = p.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            let argmax_l = logits.iter().enumerate().fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
            let argmax_p = p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
            proptest::prop_assert_eq!(argmax_l, argmax_p);
        }
    }
}
