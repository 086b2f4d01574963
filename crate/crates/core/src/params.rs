//! Named, trainable parameters shared by every model component.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters enter graphs as constants and are skipped by optimizers.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable: true,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of all parameters whose name starts with `prefix`, in name order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.index
            .range(prefix.to_string()..)
            .take_while(|(name, _)| name.starts_with(prefix))
            .map(|(_, id)| *id)
            .collect()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for id in self.ids_with_prefix(prefix) {
            self.params[id.0].trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds gradients collected by a backward pass into the grad buffers.
    /// Repeated calls accumulate until [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    /// Digest of the exact bit patterns of every parameter under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut hasher = Sha256::new();
        for id in self.ids_with_prefix(prefix) {
            let p = &self.params[id.0];
            hasher.update(p.name.as_bytes());
            for x in p.value.data() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn count_values(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix)
            .iter()
            .map(|id| self.params[id.0].value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_lookup_is_name_ordered() {
        let mut store = ParamStore::new();
        let b = store.register("text.b", Tensor::zeros(&[1])).unwrap();
        let a = store.register("text.a", Tensor::zeros(&[1])).unwrap();
        store.register("texture", Tensor::zeros(&[1])).unwrap();
        store.register("image.w", Tensor::zeros(&[1])).unwrap();
        assert_eq!(store.ids_with_prefix("text."), vec![a, b]);
        assert!(store.register("text.a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn fingerprint_tracks_single_bit_changes() {
        let mut store = ParamStore::new();
        let id = store.register("m.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let before = store.fingerprint("m.");
        store.get_mut(id).value.data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_ne!(before, store.fingerprint("m."));
    }
}
