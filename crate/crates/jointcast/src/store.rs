//! Named parameter storage with insertion-ordered iteration.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Suffixes reserved for optimizer state living alongside parameters.
pub const MOMENT1_SUFFIX: &str = ".m1";
pub const MOMENT2_SUFFIX: &str = ".m2";
/// Step counter entry maintained by the optimizer.
pub const STEP_KEY: &str = "optim.step";

/// Ordered map of named tensors: model parameters plus optimizer state.
/// Iteration order is insertion order, which makes checkpoints and update
/// sweeps deterministic.
#[derive(Default, Clone)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::State(format!("parameter {name:?} already registered")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Inserts or replaces without the duplicate check (checkpoint load).
    pub fn put(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// True for model parameters (as opposed to optimizer state).
    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(MOMENT1_SUFFIX) && !name.ends_with(MOMENT2_SUFFIX) && name != STEP_KEY
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .keys()
            .filter(|n| Self::is_trainable(n))
            .cloned()
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }

    /// Registers a weight matrix with entries drawn uniformly from
    /// `±1/sqrt(fan_in)`. Draws are rounded through f32 so a freshly saved
    /// checkpoint reproduces the initialization exactly.
    pub fn register_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    /// Registers a zero bias row.
    pub fn register_bias(&mut self, name: &str, fan_out: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(vec![1, fan_out]))
    }

    /// Registers an embedding table (rows x dim), same init as weights with
    /// fan_in = dim.
    pub fn register_table(
        &mut self,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (dim as f64).sqrt();
        let data: Vec<f64> = (0..rows * dim)
            .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
            .collect();
        self.insert(name, Tensor::new(vec![rows, dim], data)?)
    }

    /// Copies gradients off a tape back into the store, accumulating.
    pub fn harvest_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (name, &node) in &bound.nodes {
            if let Some(g) = tape.grad(node) {
                self.get_mut(name)?.add_grad(g)?;
            }
        }
        Ok(())
    }

    /// Zero-fills gradients for trainable parameters the last backward pass
    /// never reached (e.g. an attention family whose neighborhood came up
    /// empty in every scene of a batch), so the optimizer can step.
    pub fn fill_missing_grads(&mut self) {
        for (name, t) in self.entries.iter_mut() {
            if Self::is_trainable(name) && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.data.len()]);
            }
        }
    }
}

/// Tracks which parameters a forward pass placed on the tape, so their
/// gradients can be harvested after `backward`. Binding the same name twice
/// returns the same tape node, keeping gradient accumulation correct when a
/// layer is reused (shared weights).
pub struct Bound {
    nodes: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn new() -> Self {
        Bound {
            nodes: IndexMap::new(),
        }
    }

    /// Leaf node for a named parameter, created on first use.
    pub fn param(
        &mut self,
        tape: &mut Tape,
        store: &ParameterStore,
        name: &str,
    ) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let t = store.get(name)?;
        let (rows, cols) = match t.shape.len() {
            1 => (1, t.shape[0]),
            2 => (t.shape[0], t.shape[1]),
            r => {
                return Err(Error::Dimension(format!(
                    "parameter {name:?} has rank {r}, expected 1 or 2"
                )))
            }
        };
        let id = tape.leaf(rows, cols, t.data.clone(), true);
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(|s| s.as_str())
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }
}

impl Default for Bound {
    fn default() -> Self {
        Self::new()
    }
}
