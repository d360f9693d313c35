use indexmap::IndexMap;
use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;

use crate::{Error, Result};

/// One named, shaped array of trainable reals plus its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Param {
    fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n = values.len();
        Param {
            shape,
            values,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Insertion-ordered collection of parameters. Order matters: it fixes the
/// checkpoint layout and the iteration order of every update, which keeps
/// training bit-deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "`{name}` declared {shape:?} but got {} values",
                values.len()
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries
            .insert(name.to_string(), Param::new(shape.to_vec(), values));
        Ok(())
    }

    /// Registers a parameter drawn from U(-bound, bound).
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, shape, values)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    fn expect(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }

    fn expect_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }

    pub fn values(&self, name: &str) -> &[f64] {
        &self.expect(name).values
    }

    pub fn values_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.expect_mut(name).values
    }

    pub fn grad(&self, name: &str) -> &[f64] {
        &self.expect(name).grad
    }

    /// Rank-2 view of a parameter. Panics if the parameter is not a matrix.
    pub fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        let p = self.expect(name);
        assert_eq!(p.shape.len(), 2, "`{name}` is not a matrix");
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.values).expect("shape checked on insert")
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.values(name))
    }

    /// Adds `g` into the gradient buffer of `name`.
    pub fn accumulate_grad<'a, I>(&mut self, name: &str, g: I)
    where
        I: IntoIterator<Item = &'a f64>,
    {
        let p = self.expect_mut(name);
        let mut n = 0;
        for (dst, src) in p.grad.iter_mut().zip(g) {
            *dst += *src;
            n += 1;
        }
        debug_assert_eq!(n, p.grad.len(), "gradient length mismatch for `{name}`");
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm > 0.0 && norm > max_norm {
            let scale = max_norm / norm;
            for p in self.entries.values_mut() {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// Overwrites values with those of `other` (same layout required).
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            assert_eq!(na, nb, "parameter layouts differ");
            a.values.copy_from_slice(&b.values);
        }
    }

    /// `self ← tau·online + (1 − tau)·self`, entrywise.
    pub fn ema_from(&mut self, online: &ParamStore, tau: f64) {
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(online.entries.iter()) {
            assert_eq!(na, nb, "parameter layouts differ");
            for (t, o) in a.values.iter_mut().zip(&b.values) {
                *t = tau * o + (1.0 - tau) * *t;
            }
        }
    }

    /// A copy holding only values; gradients and moments are reset.
    pub fn snapshot(&self) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), Param::new(p.shape.clone(), p.values.clone())))
            .collect();
        ParamStore { entries }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in &self.entries {
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name: name.clone() });
            }
        }
        Ok(())
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }

    /// Moves every entry of `other` into `self` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for (name, p) in other.iter() {
            self.insert(&format!("{prefix}{name}"), p.shape(), p.values.clone())?;
        }
        Ok(())
    }

    /// Extracts entries starting with `prefix`, stripping it.
    pub fn split_prefixed(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, p.shape(), p.values.clone())
                    .expect("names unique in source store");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", &[2], vec![1.0, 2.0]).unwrap();
        assert!(s.insert("w", &[2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn shape_must_match_payload() {
        let mut s = ParamStore::new();
        assert!(matches!(s.insert("w", &[2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn ema_is_exact_convex_combination() {
        let mut target = ParamStore::new();
        target.insert("w", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut online = ParamStore::new();
        online.insert("w", &[3], vec![3.0, 4.0, -1.0]).unwrap();
        let tau = 0.01;
        target.ema_from(&online, tau);
        let expect: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip([3.0, 4.0, -1.0])
            .map(|(t, o)| tau * o + (1.0 - tau) * t)
            .collect();
        assert_eq!(target.values("w"), expect.as_slice());
    }

    #[test]
    fn non_finite_names_offender() {
        let mut s = ParamStore::new();
        s.insert("ok", &[1], vec![1.0]).unwrap();
        s.insert("bad", &[2], vec![1.0, f64::NAN]).unwrap();
        match s.check_finite() {
            Err(Error::NonFinite { name }) => assert_eq!(name, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::new();
        s.insert("w", &[2], vec![0.0, 0.0]).unwrap();
        s.accumulate_grad("w", &[3.0, 4.0]);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
    }
}
