//! Named parameter storage with freezing and content hashing.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Flat registry of every trainable tensor in a model, keyed by dotted names
/// (`global.block0.attn.q.weight`). Namespaces double as freezing groups.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, frozen: false });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
            n += 1;
        }
        n
    }

    /// Freeze exactly the named parameters and unfreeze the rest.
    pub fn set_frozen_names(&mut self, names: &[String]) {
        for e in &mut self.entries {
            e.frozen = names.contains(&e.name);
        }
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for e in &mut self.entries {
            e.frozen = frozen;
        }
    }

    pub fn numel(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and exact values of parameters under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Overwrite values from a name->tensor map. Every parameter must be present.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let src = named
                .get(&e.name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {}", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::shape("load parameter", e.value.shape(), src.shape()));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), frozen: e.frozen })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Xavier-uniform matrix `[fan_in, fan_out]`.
pub fn xavier<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::<T>::randn(shape, rng).scale(T::from_f64_lossy(std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_only_for_touched_namespace() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("global.w", Tensor::ones(&[2, 2]));
        s.add("detail.w", Tensor::ones(&[3]));
        let hg = s.hash_prefix("global.");
        let hd = s.hash_prefix("detail.");
        s.get_mut(a).data_mut()[0] = 2.0;
        assert_ne!(hg, s.hash_prefix("global."));
        assert_eq!(hd, s.hash_prefix("detail."));
    }

    #[test]
    fn set_frozen_by_prefix() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("global.a", Tensor::zeros(&[1]));
        let b = s.add("decoder.b", Tensor::zeros(&[1]));
        assert_eq!(s.set_frozen("global.", true), 1);
        assert!(s.is_frozen(a));
        assert!(!s.is_frozen(b));
    }
}
