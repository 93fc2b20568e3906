//! Named parameter storage with per-parameter trainable flags.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{AutogradError, Result, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered name → tensor map.
///
/// Each store carries a process-unique id so that parameters from several
/// stores can take part in one graph without their indices colliding. Cloning
/// a store yields a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutogradError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    /// Removes a parameter. Indices of later parameters shift down by one.
    pub fn remove(&mut self, name: &str) -> Option<Param> {
        let id = self.index.remove(name)?;
        let p = self.params.remove(id);
        for v in self.index.values_mut() {
            if *v > id {
                *v -= 1;
            }
        }
        Some(p)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.params[i].value)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.id(name)
            .ok_or_else(|| AutogradError::MissingParam(name.to_string()))
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.require(name)?;
        if self.params[id].value.shape() != value.shape() {
            return Err(AutogradError::Shape(format!(
                "{name}: stored {:?}, new {:?}",
                self.params[id].value.shape(),
                value.shape()
            )));
        }
        self.params[id].value = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.params[id].trainable
    }

    pub fn set_trainable(&mut self, id: usize, trainable: bool) {
        self.params[id].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Sets the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total scalar count, optionally restricted to trainable parameters.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}
