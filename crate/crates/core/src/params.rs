//! Named parameter storage shared by every block in the network.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / projection weights.
    Weight,
    Bias,
    /// Normalization scale and shift.
    Norm,
    /// Learnable scalar such as an attention temperature.
    Scalar,
    /// Non-trainable state (normalization running statistics).
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// Values are clamped to at least this after every optimizer step.
    pub lower_bound: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            lower_bound: None,
        });
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

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Fill every parameter whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            e.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            n += 1;
        }
        n
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                    lower_bound: e.lower_bound,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn apply_bounds(&mut self) {
        for e in &mut self.entries {
            if let Some(lb) = e.lower_bound {
                let lb = T::of(lb);
                e.value.data_mut().iter_mut().for_each(|v| *v = v.max(lb));
            }
        }
    }
}

/// Creates parameters under a hierarchical name prefix (`neck.fuse0.conv.weight`).
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        kind: ParamKind,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        let path = self.path(name);
        self.store.add(path, kind, t)
    }

    pub fn constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
        kind: ParamKind,
    ) -> ParamId {
        let path = self.path(name);
        self.store
            .add(path, kind, Tensor::full(shape, T::of(value)))
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn set_lower_bound(&mut self, id: ParamId, lb: f64) {
        self.store.entry_mut(id).lower_bound = Some(lb);
    }
}
