use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Fnv, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, ordered lexicographically by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Order-sensitive hash over names, shapes and exact value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    /// Registers every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Graph handles for a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn extend(&mut self, other: BoundParams) {
        self.vars.extend(other.vars);
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        BoundParams {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Per-parameter RNG so a tensor's initial value depends only on the run
/// seed and its name, not on which other parameters exist.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Fnv::default();
    h.write(&seed.to_le_bytes());
    h.write(name.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal_init(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::ones(&[2]));
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut("x").unwrap().data_mut()[1] = 1.0 + 1e-15;
        assert_ne!(a.checksum(), b.checksum());
        let mut c = ParamSet::new();
        c.insert("y", Tensor::ones(&[2]));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_depends_on_name_and_seed() {
        let a = normal_init(7, "w", &[4]);
        assert_eq!(a, normal_init(7, "w", &[4]));
        assert_ne!(a, normal_init(8, "w", &[4]));
        assert_ne!(a, normal_init(7, "v", &[4]));
    }
}
