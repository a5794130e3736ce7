//! Named parameter tensors, their binding onto a tape, and checkpoint I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fogsim::{read_json, write_json};
use crate::rng::Rng;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    tensors: Vec<CheckpointEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Inserts a Gaussian tensor with standard deviation `1/sqrt(fan_in)`.
    pub fn init_normal(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::Architecture(format!("parameter {name} missing"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Architecture(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Architecture(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.bin");
            t.save(&dir.join(&file))?;
            entries.push(CheckpointEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        write_json(&dir.join(CHECKPOINT_MANIFEST), &CheckpointManifest { tensors: entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let path = dir.join(&e.file);
            let t = Tensor::load(&path)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format {
                    path,
                    reason: format!("shape {:?} disagrees with manifest {:?}", t.shape(), e.shape),
                });
            }
            store.insert(e.name, t);
        }
        Ok(store)
    }

    /// SHA-256 over names and the binary encoding of every tensor.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Binding {
    /// Binding over already-recorded variables, e.g. inside a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Binding {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Architecture(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter name; zeros where the loss did not depend
    /// on a parameter.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g)))
            .collect()
    }
}
