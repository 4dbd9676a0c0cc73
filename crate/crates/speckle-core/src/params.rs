//! Named parameter registry shared by model blocks, the optimizer, and
//! checkpoints.
//!
//! Blocks hold [`Tensor`] handles directly; the registry aliases the same
//! storage, so optimizer updates and checkpoint loads are visible to the
//! blocks without any re-wiring.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter name {0:?}")]
    Unknown(String),
}

/// Distinguishes optimizer-updated parameters from tracked state such as
/// batch-norm running statistics, which neither decay nor receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    State,
}

pub struct ParamEntry {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Ordered name-to-tensor registry. Iteration order is the sorted name
/// order, which keeps optimizer sweeps and checkpoints deterministic.
#[derive(Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name. Trainable entries are marked
    /// `requires_grad`; state entries are not.
    pub fn insert(
        &mut self,
        name: &str,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<Tensor, ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        tensor.set_requires_grad(kind == ParamKind::Trainable);
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor: tensor.clone(),
                kind,
            },
        );
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, ParamError> {
        self.entries
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
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

    /// All entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable entries in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn zero_grads(&self) {
        for e in self.entries.values() {
            e.tensor.zero_grad();
        }
    }

    /// Total number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(vec![2]), ParamKind::Trainable)
            .unwrap();
        assert!(matches!(
            ps.insert("w", Tensor::zeros(vec![2]), ParamKind::Trainable),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn trainable_flag_drives_requires_grad() {
        let mut ps = ParamSet::new();
        let w = ps
            .insert("w", Tensor::zeros(vec![2]), ParamKind::Trainable)
            .unwrap();
        let s = ps
            .insert("bn.running_mean", Tensor::zeros(vec![2]), ParamKind::State)
            .unwrap();
        assert!(w.requires_grad());
        assert!(!s.requires_grad());
        assert_eq!(ps.trainable().count(), 1);
    }

    #[test]
    fn iteration_is_name_ordered() {
        let mut ps = ParamSet::new();
        for name in ["zeta", "alpha", "mid"] {
            ps.insert(name, Tensor::zeros(vec![1]), ParamKind::Trainable)
                .unwrap();
        }
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["alpha", "mid", "zeta"]);
    }

    #[test]
    fn registry_aliases_block_handles() {
        let mut ps = ParamSet::new();
        let held = ps
            .insert("w", Tensor::zeros(vec![2]), ParamKind::Trainable)
            .unwrap();
        ps.get("w")
            .unwrap()
            .tensor
            .set_data(&[5.0, 6.0])
            .unwrap();
        assert_eq!(held.value(), vec![5.0, 6.0]);
    }
}
