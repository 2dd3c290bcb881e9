//! Named parameter storage. Models register tensors here once at
//! construction; tapes read them as leaves and write gradients back through
//! [`ParamSet::accumulate_grad`]. Iteration order is registration order, which
//! keeps optimizer updates and checkpoints deterministic.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name and marks it differentiable.
    pub fn register(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(
                "ParamSet::register",
                format!("duplicate parameter name '{name}'"),
            ));
        }
        value.requires_grad = true;
        value.grad = None;
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].value.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient (allocating it on first use).
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if delta.len() != entry.value.numel() {
            return Err(Error::shape(
                "ParamSet::accumulate_grad",
                format!("{} elements for '{}'", entry.value.numel(), entry.name),
                format!("{}", delta.len()),
            ));
        }
        let grad = entry
            .value
            .grad
            .get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Scales every stored gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            if let Some(g) = e.value.grad.as_mut() {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Ids of parameters whose name starts with one of the given prefixes.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Bitwise equality of all parameter values (gradients ignored).
    pub fn values_identical(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ParamSet::new();
        p.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.register("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grads_accumulate_additively() {
        let mut p = ParamSet::new();
        let id = p.register("w", Tensor::zeros(&[3])).unwrap();
        p.accumulate_grad(id, &[1.0, 2.0, 3.0]).unwrap();
        p.accumulate_grad(id, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p.grad(id).unwrap(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn prefix_selection_matches_names() {
        let mut p = ParamSet::new();
        p.register("backbone.enc.w", Tensor::zeros(&[1])).unwrap();
        p.register("personalizer.prompt.0", Tensor::zeros(&[1])).unwrap();
        let ids = p.ids_with_prefix(&["personalizer."]);
        assert_eq!(ids.len(), 1);
        assert_eq!(p.name(ids[0]), "personalizer.prompt.0");
    }
}
