use sha2::{Digest, Sha256};

use super::{Checkpoint, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store, and of the var returned by [`ParamStore::bind`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors with their most recent gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(None);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a trainable leaf; the returned vars are
    /// indexed like the store.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Copies the gradients of a finished backward pass into the store.
    /// Parameters the loss never reached get no gradient.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (slot, &var) in self.grads.iter_mut().zip(vars) {
            *slot = tape.grad(var).cloned();
        }
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, Option<&Tensor>)> {
        self.names
            .iter()
            .zip(self.values.iter_mut())
            .zip(self.grads.iter())
            .map(|((n, v), g)| (n.as_str(), v, g.as_ref()))
    }

    /// Digest of every name, shape and value bit pattern. Stable across
    /// builds and platforms.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update([0]);
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { entries: self.names.iter().cloned().zip(self.values.iter().cloned()).collect() }
    }

    /// Rebuilds a store from checkpoint entries whose names pass `keep`.
    pub fn from_checkpoint(ck: &Checkpoint, keep: impl Fn(&str) -> bool) -> Self {
        let mut store = Self::new();
        for (name, t) in ck.entries.iter().filter(|(n, _)| keep(n)) {
            store.push(name.clone(), t.clone());
        }
        store
    }

    /// Overwrites values from a store with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if self.names != other.names {
            return Err(TensorError::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(TensorError::Checkpoint(format!("shape {:?} vs {:?}", dst.shape(), src.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}
