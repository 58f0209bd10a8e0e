//! Named parameter storage and per-pass binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Ordered name → tensor map. Iteration order is lexicographic, which keeps
/// digests and archives stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.entries.keys().filter(move |k| k.starts_with(prefix))
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// SHA-256 over names, shapes and little-endian data of all entries whose
    /// name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    // ---- initializers ----

    /// Gaussian weights scaled by `gain / sqrt(fan_in)`.
    pub fn init_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) {
        let std = gain / (fan_in as f64).sqrt();
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }
}

/// Which parameters receive gradients during a pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes(ps: &[&str]) -> Self {
        Trainable::Prefixes(ps.iter().map(|s| s.to_string()).collect())
    }

    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A graph plus lazy, cached binding of stored parameters.
pub struct Ctx<'g, 's> {
    pub g: &'g mut Graph,
    store: &'s ParamStore,
    train: Trainable,
    bound: HashMap<String, NodeId>,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(g: &'g mut Graph, store: &'s ParamStore, train: Trainable) -> Self {
        Self { g, store, train, bound: HashMap::new() }
    }

    /// Node for parameter `name`, binding it on first use.
    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.store.get(name)?.clone();
        let id = if self.train.allows(name) { self.g.param(t) } else { self.g.constant(t) };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Binds `name` to an existing node instead of the stored tensor.
    pub fn preset(&mut self, name: &str, id: NodeId) {
        self.bound.insert(name.to_string(), id);
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Gradients of every bound trainable parameter, sorted by name.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .bound
            .iter()
            .filter(|(name, _)| self.train.allows(name))
            .filter_map(|(name, &id)| self.g.grad(id).map(|t| (name.clone(), t)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Names of bound parameters, for tests that check what was touched.
    pub fn bound_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.bound.keys().cloned().collect();
        v.sort();
        v
    }

    /// `x[n, d_in] · w[d_in, d_out] (+ b)`
    pub fn linear(&mut self, x: NodeId, w: &str, b: Option<&str>) -> Result<NodeId> {
        let wn = self.p(w)?;
        let y = self.g.matmul(x, wn)?;
        match b {
            Some(b) => {
                let bn = self.p(b)?;
                self.g.add_bias(y, bn)
            }
            None => Ok(y),
        }
    }

    pub fn conv1x1(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.conv1x1(x, w, b)
    }

    pub fn conv3x3(&mut self, x: NodeId, prefix: &str, stride: usize) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.conv3x3(x, w, b, stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_prefixes() {
        let t = Trainable::prefixes(&["adapter.", "motion."]);
        assert!(t.allows("adapter.x"));
        assert!(!t.allows("base.conv"));
        assert!(!Trainable::Nothing.allows("adapter.x"));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        store.insert("base.w", Tensor::full(&[2, 2], 1.0));
        store.insert("adapter.w", Tensor::full(&[2, 2], 2.0));
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, Trainable::prefixes(&["adapter."]));
        let x = ctx.g.constant(Tensor::full(&[1, 2], 1.0));
        let h = ctx.linear(x, "base.w", None).unwrap();
        let y = ctx.linear(h, "adapter.w", None).unwrap();
        let s = ctx.g.sum(y).unwrap();
        ctx.g.backward(s).unwrap();
        let grads = ctx.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "adapter.w");
    }

    #[test]
    fn digest_depends_on_values() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::full(&[2], 1.0));
        let mut b = a.clone();
        assert_eq!(a.digest(""), b.digest(""));
        b.insert("x", Tensor::full(&[2], 1.0 + 1e-15));
        assert_ne!(a.digest(""), b.digest(""));
    }
}
