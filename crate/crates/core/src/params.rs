//! Named parameter storage with ownership flags, tape binding, and Adam.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Who owns (and may update) a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ownership {
    /// Backbone weight; never updated after initialization.
    Frozen,
    /// Trainable in every domain (adapter-common, heads, decoder blocks).
    Shared,
    /// Trainable only while its domain is the active one.
    DomainSpecific(usize),
}

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub ownership: Ownership,
}

/// Insertion-ordered parameter table; iteration order is deterministic and
/// defines the checkpoint layout.
#[derive(Default, Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, ownership: Ownership) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            ownership,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.ownership == Ownership::Frozen)
            .map(|(id, _)| id)
            .collect()
    }

    /// Update set for one active domain: everything shared plus that domain's
    /// specific tensors.
    pub fn update_set(&self, domain: usize) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| match e.ownership {
                Ownership::Frozen => false,
                Ownership::Shared => true,
                Ownership::DomainSpecific(k) => k == domain,
            })
            .map(|(id, _)| id)
            .collect()
    }

    /// Everything that may ever be trained, across all domains.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.ownership != Ownership::Frozen)
            .map(|(id, _)| id)
            .collect()
    }

    /// Snapshot of raw values for bitwise comparisons.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.value(id).clone()).collect()
    }
}

/// Per-tape memoized binding of parameters to leaves, so each parameter
/// appears exactly once on a tape and its gradient accumulates in one place.
#[derive(Default)]
pub struct Binding {
    vars: HashMap<ParamId, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        *self
            .vars
            .entry(id)
            .or_insert_with(|| tape.leaf(store.value(id).clone()))
    }

    /// Gradient of a bound parameter, if it took part in the graph.
    pub fn grad<'g>(&self, grads: &'g Grads, id: ParamId) -> Option<&'g Tensor> {
        self.vars.get(&id).and_then(|&v| grads.get(v))
    }
}

/// Adam with bias correction; moments are kept per parameter id and reset
/// when a new optimizer is constructed.
pub struct Adam {
    pub base_lr: f64,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    update_set: Vec<ParamId>,
    m: HashMap<ParamId, Tensor>,
    v: HashMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, update_set: Vec<ParamId>) -> Self {
        Self {
            base_lr: lr,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            update_set,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn update_set(&self) -> &[ParamId] {
        &self.update_set
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Verify no frozen parameter can ever be touched by this optimizer.
    pub fn audit_disjoint_from_frozen(&self, store: &ParamStore) -> Result<()> {
        for &id in &self.update_set {
            if store.entry(id).ownership == Ownership::Frozen {
                return Err(Error::Training(format!(
                    "frozen parameter `{}` in optimizer update set",
                    store.entry(id).name
                )));
            }
        }
        Ok(())
    }

    /// One Adam step over the update set. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for &id in &self.update_set {
            let Some(g) = grads.get(&id) else { continue };
            let shape = store.value(id).shape().to_vec();
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let value = store.value_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
