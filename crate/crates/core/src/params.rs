//! Named parameter storage, freezing, and binding onto a tape.

use std::collections::BTreeMap;

use avm_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{rng, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Modulation,
    Readout,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Modulation, ParamGroup::Readout];
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
}

/// Which groups an optimizer may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub phase: Phase,
    pub backbone: bool,
    pub modulation: bool,
    pub readout: bool,
}

impl FreezePlan {
    /// Everything trainable.
    pub fn phase1() -> Self {
        Self {
            phase: Phase::Phase1,
            backbone: true,
            modulation: true,
            readout: true,
        }
    }

    /// Backbone frozen; modulation trainable; readout per flag.
    pub fn phase2(train_readout: bool) -> Self {
        Self {
            phase: Phase::Phase2,
            backbone: false,
            modulation: true,
            readout: train_readout,
        }
    }

    /// Conventional fine-tuning baseline: everything trainable in Phase 2.
    pub fn full_finetune() -> Self {
        Self {
            phase: Phase::Phase2,
            ..Self::phase1()
        }
    }

    pub fn frozen() -> Self {
        Self {
            phase: Phase::Phase2,
            backbone: false,
            modulation: false,
            readout: false,
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Modulation => self.modulation,
            ParamGroup::Readout => self.readout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountScope {
    All,
    Trainable,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CoreError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name, group, value, grad });
        Ok(id)
    }

    /// Inserts a tensor drawn uniformly from `(-bound, bound)`, seeded by name
    /// so the draw does not depend on insertion order.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        seed: u64,
    ) -> Result<ParamId> {
        let value = uniform_tensor(shape, bound, seed, name);
        self.insert(name, group, value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn count(&self, scope: CountScope, plan: &FreezePlan) -> usize {
        self.params
            .iter()
            .filter(|p| scope == CountScope::All || plan.is_trainable(p.group))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on the tape; only trainable groups track
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, plan: &FreezePlan) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), plan.is_trainable(p.group)))
            .collect();
        Bound { vars }
    }

    /// Adds tape gradients of trainable parameters into the stored buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound, plan: &FreezePlan) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !plan.is_trainable(p.group) {
                continue;
            }
            let g = tape.grad(bound.vars[i])?;
            for (acc, v) in p.grad.iter_mut().zip(g.iter()) {
                *acc += v;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// SHA-256 over names, shapes and little-endian values of one group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Flattened values of the listed parameters, in order.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&id| self.value(id).data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, ids: &[ParamId], flat: &[f64]) -> Result<()> {
        let total: usize = ids.iter().map(|&id| self.value(id).numel()).sum();
        if total != flat.len() {
            return Err(CoreError::Contract(format!(
                "expected {total} values for {} parameters, got {}",
                ids.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for &id in ids {
            let data = self.value_mut(id).data_mut();
            let n = data.len();
            data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Ids of every parameter in the given groups.
    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Drops every parameter of `group`; returns how many were removed.
    ///
    /// Ids of the remaining parameters are renumbered, so handles held by
    /// modules must be rebuilt afterwards.
    pub(crate) fn remove_group(&mut self, group: ParamGroup) -> usize {
        let before = self.params.len();
        self.params.retain(|p| p.group != group);
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        before - self.params.len()
    }
}

/// Initial value of a declared parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Uniform(f64),
    Constant(f64),
}

/// Declares parameters either by creating them or by locating existing
/// ones, so module layouts are written once.
pub(crate) enum Slot<'a> {
    Create { store: &'a mut ParamStore, seed: u64 },
    Resolve(&'a ParamStore),
}

impl Slot<'_> {
    pub(crate) fn param(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            Slot::Create { store, seed } => {
                let value = match init {
                    Init::Uniform(bound) => uniform_tensor(shape, bound, *seed, name),
                    Init::Constant(c) => Tensor::full(shape, c),
                };
                store.insert(name, group, value)
            }
            Slot::Resolve(store) => {
                let id = store
                    .id(name)
                    .ok_or_else(|| CoreError::Contract(format!("missing parameter {name}")))?;
                let p = store.get(id);
                if p.value.shape() != shape || p.group != group {
                    return Err(CoreError::Contract(format!(
                        "parameter {name} has shape {:?} in group {:?}, expected {shape:?} in {group:?}",
                        p.value.shape(),
                        p.group
                    )));
                }
                Ok(id)
            }
        }
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor {
    let mut rng = rng::stream(seed, name, 0);
    Tensor::from_fn(shape, |_| {
        if bound > 0.0 {
            rng.random_range(-bound..bound)
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", ParamGroup::Backbone, Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", ParamGroup::Readout, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn counts_follow_freeze_plan() {
        let mut s = ParamStore::new();
        s.insert("b", ParamGroup::Backbone, Tensor::zeros(&[3, 4])).unwrap();
        s.insert("m", ParamGroup::Modulation, Tensor::zeros(&[5])).unwrap();
        s.insert("r", ParamGroup::Readout, Tensor::zeros(&[2])).unwrap();
        assert_eq!(s.count(CountScope::All, &FreezePlan::phase1()), 19);
        assert_eq!(s.count(CountScope::Trainable, &FreezePlan::phase1()), 19);
        assert_eq!(s.count(CountScope::Trainable, &FreezePlan::phase2(true)), 7);
        assert_eq!(s.count(CountScope::Trainable, &FreezePlan::phase2(false)), 5);
        assert_eq!(s.count(CountScope::Trainable, &FreezePlan::frozen()), 0);
    }

    #[test]
    fn uniform_draw_is_order_independent() {
        let mut a = ParamStore::new();
        a.insert_uniform("x", ParamGroup::Backbone, &[4], 0.5, 7).unwrap();
        a.insert_uniform("y", ParamGroup::Backbone, &[4], 0.5, 7).unwrap();
        let mut b = ParamStore::new();
        b.insert_uniform("y", ParamGroup::Backbone, &[4], 0.5, 7).unwrap();
        b.insert_uniform("x", ParamGroup::Backbone, &[4], 0.5, 7).unwrap();
        assert_eq!(a.by_name("x").unwrap().value, b.by_name("x").unwrap().value);
        assert!(a.by_name("x").unwrap().value.data().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.insert("b", ParamGroup::Backbone, Tensor::zeros(&[2])).unwrap();
        s.insert("r", ParamGroup::Readout, Tensor::zeros(&[2])).unwrap();
        let h0 = s.group_hash(ParamGroup::Backbone);
        s.value_mut(ParamId(1)).data_mut()[0] = 1.0;
        assert_eq!(h0, s.group_hash(ParamGroup::Backbone));
        s.value_mut(id).data_mut()[0] = 1e-300;
        assert_ne!(h0, s.group_hash(ParamGroup::Backbone));
    }
}
