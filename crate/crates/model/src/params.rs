//! Named parameter sets and their tape bindings.
//!
//! A `ParamSet` owns the master copies in registration order (fixed order
//! keeps training runs and checkpoints deterministic). Each forward pass
//! binds the set onto a fresh tape as leaves.

use std::collections::HashMap;

use aural_core::{checkpoint, GradTape, Tensor, ValueId};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.index.insert(name.clone(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut (String, Tensor)> {
        self.entries.iter_mut()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bind every parameter onto the tape; `trainable` controls whether
    /// gradients are requested.
    pub fn bind(&self, tape: &mut GradTape, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                tape.leaf(t)
            })
            .collect();
        Bound { ids, index: self.index.clone() }
    }

    /// Gradients in registration order after a backward pass.
    pub fn grads(&self, tape: &GradTape, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.ids.iter().map(|&id| tape.grad(id)).collect()
    }

    pub fn checkpoint_entries<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        self.entries.iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
    }

    /// Replace values from checkpoint entries carrying the given prefix.
    /// Every parameter must be present with a matching shape.
    pub fn load_checkpoint_entries(
        &mut self,
        loaded: &[(String, Tensor)],
        prefix: &str,
    ) -> Result<()> {
        for (name, tensor) in &mut self.entries {
            let full = format!("{prefix}{name}");
            let Some((_, t)) = loaded.iter().find(|(n, _)| *n == full) else {
                return Err(ModelError::Config(format!("checkpoint missing tensor {full:?}")));
            };
            if t.shape() != tensor.shape() {
                return Err(ModelError::Config(format!(
                    "checkpoint tensor {:?} has shape {:?}, expected {:?}",
                    full,
                    t.shape(),
                    tensor.shape()
                )));
            }
            *tensor = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path, prefix: &str) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries(prefix))?;
        Ok(())
    }
}

/// Parameter handles on one tape.
pub struct Bound {
    ids: Vec<ValueId>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Assemble from pre-registered leaves, e.g. inside a finite-difference
    /// harness that owns the leaf tensors itself.
    pub fn from_names_ids(names: &[String], ids: &[ValueId]) -> Self {
        assert_eq!(names.len(), ids.len());
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { ids: ids.to_vec(), index }
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self
            .index
            .get(name)
            .map(|&i| &self.ids[i])
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }
}
