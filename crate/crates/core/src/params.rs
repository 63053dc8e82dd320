//! Named, ordered parameter storage.
//!
//! Entries keep the order in which layers registered them, which is the
//! order used by checkpoints and optimizers. Running batch-norm statistics
//! live alongside learnable tensors as [`ParamKind::Buffer`] entries so a
//! checkpoint captures everything a forward pass reads.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nnops::NormStats;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Non-learnable state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Learnable).map(|(id, _)| id)
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.kind == ParamKind::Learnable).map(|p| p.value.len()).sum()
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::mismatch("assign", value.shape(), slot.value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.bit_eq(&b.value))
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Folds batch statistics from a train-mode pass into running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let (mean_idx, var_idx) = (u.running_mean.0, u.running_var.0);
            let mut mean = std::mem::replace(&mut self.entries[mean_idx].value, Tensor::scalar(T::zero()));
            crate::nnops::update_running(&mut mean, &mut self.entries[var_idx].value, &u.stats, u.momentum);
            self.entries[mean_idx].value = mean;
        }
    }
}

/// Batch statistics observed by one batch-norm layer during a train-mode
/// recording, not yet applied.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: NormStats<T>,
    pub momentum: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_lookup() {
        let mut set: ParamSet<f32> = ParamSet::new();
        let a = set.push("a.weight", ParamKind::Learnable, Tensor::zeros([2, 2, 1, 1])).unwrap();
        let b = set.push("a.running_mean", ParamKind::Buffer, Tensor::zeros([1, 2, 1, 1])).unwrap();
        assert_eq!(set.find("a.weight"), Some(a));
        assert_eq!(set.find("a.running_mean"), Some(b));
        assert_eq!(set.learnable_count(), 4);
        assert_eq!(set.learnable_ids().collect::<Vec<_>>(), vec![a]);
        assert!(set.push("a.weight", ParamKind::Learnable, Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn assign_checks_shape() {
        let mut set: ParamSet<f32> = ParamSet::new();
        let a = set.push("w", ParamKind::Learnable, Tensor::zeros([1, 2, 1, 1])).unwrap();
        assert!(set.assign(a, Tensor::zeros([2, 1, 1, 1])).is_err());
        set.assign(a, Tensor::full([1, 2, 1, 1], 3.0)).unwrap();
        assert_eq!(set.value(a).data(), &[3.0, 3.0]);
    }
}
