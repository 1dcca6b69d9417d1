use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

/// Named parameters. Iteration order is the lexical order of names, which
/// keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                frozen,
                grad: None,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::state(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::state(format!("unknown parameter `{name}`")))
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        self.param(name).map(|p| p.frozen)
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::state(format!("unknown parameter `{name}`")))?;
        if grad.len() != entry.value.len() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                grad.len(),
                entry.value.len()
            )));
        }
        let grad = grad.reshape(entry.value.shape().to_vec())?;
        entry.grad = Some(grad);
        Ok(())
    }

    /// Replaces all gradients with the given map; unlisted entries get none.
    pub fn set_grads(&mut self, grads: BTreeMap<String, Tensor>) -> Result<()> {
        self.zero_grads();
        for (name, g) in grads {
            self.set_grad(&name, g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Parameter values only, detached from gradients and freeze flags.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_shape_must_match_value() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 3]), false);
        assert!(store.set_grad("w", Tensor::zeros(&[5])).is_err());
        store.set_grad("w", Tensor::zeros(&[6])).unwrap();
        assert_eq!(store.param("w").unwrap().grad.as_ref().unwrap().shape(), &[2, 3]);
        assert!(store.set_grad("missing", Tensor::zeros(&[1])).is_err());
    }
}
