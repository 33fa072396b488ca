//! Named, hierarchical parameter collections and their tape bindings.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable tensors keyed by dotted path (`pose.spatial.post.0.kernel`).
/// Iteration order is lexicographic by name, which keeps every traversal
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        tensor.set_requires_grad(true);
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter `{name}` has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count per top-level group prefix (`prefix` up to `depth` dots).
    pub fn group_counts(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.tensors {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += t.len();
        }
        out
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t)))
            .collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] but no parameter receives gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t)))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients held on `tape` into each parameter's slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, var) in &bound.vars {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), tape.grad(*var)) {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Parameter name to tape variable map produced by [`ParamStore::bind`].
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not part of this model")))
    }

    pub fn var(&self, prefix: &str, leaf: &str) -> Result<Var> {
        self.get(&format!("{prefix}.{leaf}"))
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Glorot/Xavier uniform bound.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, glorot_bound(fan_in, fan_out), rng)
}

/// Registers a `[width, c_in, c_out]` kernel and `[c_out]` bias under `prefix`.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) {
    let kernel = glorot([width, c_in, c_out], width * c_in, width * c_out, rng);
    store.insert(format!("{prefix}.kernel"), kernel);
    store.insert(format!("{prefix}.bias"), Tensor::zeros([c_out]));
}

/// Registers a `[d_in, d_out]` weight and `[d_out]` bias under `prefix`.
pub fn init_dense<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    store.insert(format!("{prefix}.weight"), glorot([d_in, d_out], d_in, d_out, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([d_out]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_accumulate_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = bound.get("a.w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape, &bound);
        store.accumulate_grads(&tape, &bound);
        assert_eq!(store.get("a.w").unwrap().grad().unwrap(), &[4.0, 8.0]);
        store.zero_grads();
        assert!(store.get("a.w").unwrap().grad().is_none());
    }

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = glorot([10, 20], 10, 20, &mut rng);
        let b = glorot_bound(10, 20);
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn missing_parameter_is_a_contract_error() {
        let store = ParamStore::new();
        assert!(matches!(store.get("nope"), Err(Error::Contract(_))));
    }
}
