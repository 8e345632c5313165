//! Named parameter storage and per-pass binding into a [`Graph`].

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named tensors. Insertion order is the canonical order
/// used by the optimizer, checksums and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf. Parameters for which `trainable`
    /// returns false are bound as constants and never receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| g.leaf(t.clone(), trainable(n)))
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind(g, |_| false)
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    /// Shapes must match.
    pub fn copy_prefix_from(&mut self, other: &ParamSet, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (_, name, src) in other.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            let id = self.require(name)?;
            if self.get(id).shape() != src.shape() {
                return Err(Error::shape("copy_params", self.get(id).shape(), src.shape()));
            }
            *self.get_mut(id) = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and little-endian values in canonical order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Graph handles for one [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients after `backward`, `None` where no gradient arrived.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros([2])).unwrap();
        assert!(p.insert("w", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = ParamSet::new();
        let id = p.insert("w", Tensor::zeros([2])).unwrap();
        let before = p.checksum();
        p.get_mut(id).data_mut()[1] = 1e-300;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn frozen_binding_gets_no_gradient() {
        let mut p = ParamSet::new();
        let a = p.insert("a", Tensor::full([3], 2.0)).unwrap();
        let b = p.insert("b", Tensor::full([3], 3.0)).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, |n| n == "a");
        let prod = g.mul(bound.var(a), bound.var(b)).unwrap();
        let s = g.sum(prod);
        g.backward(s).unwrap();
        let grads = bound.grads(&g);
        assert_eq!(grads[a.index()].as_ref().unwrap().data(), &[3.0, 3.0, 3.0]);
        assert!(grads[b.index()].is_none());
    }
}
