//! The parameter registry: key -> Parameter, with deterministic iteration.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, Parameter, Tensor};

/// Shape-and-group description of one parameter, without values. Layouts are
/// pure functions of configs; the audit counts them and model construction
/// materializes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn new(key: impl Into<String>, shape: Vec<usize>, group: ParamGroup) -> Self {
        ParamSpec { key: key.into(), shape, group }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Single source of truth mapping keys to Parameters. Key order is sorted,
/// so every iteration (optimizer updates, checkpoints, audits) is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    map: BTreeMap<String, Parameter>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; the key must be new.
    pub fn insert(&mut self, param: Parameter) -> Result<()> {
        if self.map.contains_key(&param.key) {
            return Err(Error::Config(format!("duplicate registry key {}", param.key)));
        }
        self.map.insert(param.key.clone(), param);
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Result<&Parameter> {
        self.map
            .get(key)
            .ok_or_else(|| Error::Index(format!("no parameter {key}")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Parameter> {
        self.map
            .get_mut(key)
            .ok_or_else(|| Error::Index(format!("no parameter {key}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Exhaustive enumeration: scalar count per group.
    pub fn count_by_group(&self) -> BTreeMap<ParamGroup, u64> {
        let mut out = BTreeMap::new();
        for p in self.map.values() {
            *out.entry(p.group).or_insert(0) += p.value.numel() as u64;
        }
        out
    }

    pub fn total_params(&self) -> u64 {
        self.map.values().map(|p| p.value.numel() as u64).sum()
    }

    pub fn trainable_params(&self) -> u64 {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    pub fn trainable_keys(&self) -> Vec<String> {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.key.clone())
            .collect()
    }

    /// Bitwise snapshot of every parameter value, for stability checks.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Keys whose current value differs bitwise from the snapshot.
    pub fn diff_from_snapshot(&self, snapshot: &BTreeMap<String, Tensor>) -> Vec<String> {
        let mut changed = Vec::new();
        for (k, p) in self.map.iter() {
            match snapshot.get(k) {
                Some(old) if p.value.bitwise_eq(old) => {}
                _ => changed.push(k.clone()),
            }
        }
        changed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DType;

    #[test]
    fn duplicate_keys_are_rejected() {
        let mut reg = ParamRegistry::new();
        let t = Tensor::zeros(vec![2], DType::F32);
        reg.insert(Parameter::new("a", t.clone(), true, ParamGroup::Peft))
            .unwrap();
        assert!(reg
            .insert(Parameter::new("a", t, true, ParamGroup::Peft))
            .is_err());
    }

    #[test]
    fn group_counts_enumerate_exactly() {
        let mut reg = ParamRegistry::new();
        reg.insert(Parameter::new(
            "w",
            Tensor::zeros(vec![3, 4], DType::F32),
            false,
            ParamGroup::Backbone,
        ))
        .unwrap();
        reg.insert(Parameter::new(
            "g",
            Tensor::zeros(vec![4], DType::F32),
            true,
            ParamGroup::LayerNorm,
        ))
        .unwrap();
        let counts = reg.count_by_group();
        assert_eq!(counts[&ParamGroup::Backbone], 12);
        assert_eq!(counts[&ParamGroup::LayerNorm], 4);
        assert_eq!(reg.trainable_params(), 4);
    }

    #[test]
    fn snapshot_diff_detects_changes() {
        let mut reg = ParamRegistry::new();
        reg.insert(Parameter::new(
            "w",
            Tensor::zeros(vec![2], DType::F32),
            true,
            ParamGroup::Peft,
        ))
        .unwrap();
        let snap = reg.snapshot();
        assert!(reg.diff_from_snapshot(&snap).is_empty());
        reg.get_mut("w").unwrap().value.set(0, 1.0);
        assert_eq!(reg.diff_from_snapshot(&snap), vec!["w".to_string()]);
    }
}
