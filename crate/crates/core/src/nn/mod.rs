//! Parameter storage and the basic trainable layers.

mod layers;

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear};

use std::collections::HashMap;

use crate::autograd::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Owns every parameter and non-trainable buffer of a model.
///
/// Layers refer to entries by id, so a parameter shared between layers is a
/// single entry referenced from several places.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total trainable scalars. Shared parameters count once.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|(n, _)| n == name).map(BufferId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.buffers[u.mean.0].1.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.buffers[u.var.0].1.data_mut().iter_mut().zip(&u.stats.var_unbiased) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Replace values from `(name, tensor)` pairs covering every parameter and buffer.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{}: shape {:?}, model expects {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        for (name, b) in &mut self.buffers {
            let t = tensors
                .get(name.as_str())
                .ok_or_else(|| Error::format("checkpoint", format!("missing buffer {name}")))?;
            if t.shape() != b.shape() {
                return Err(Error::format("checkpoint", format!("{name}: shape mismatch")));
            }
            *b = t.clone();
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
    pub momentum: f64,
}

/// Forward-pass context: the tape being recorded plus read access to parameters.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    leaves: HashMap<ParamId, Var>,
    updates: Vec<StatUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            leaves: HashMap::new(),
            updates: Vec::new(),
        }
    }

    /// Tape leaf for a parameter; repeated requests return the same node.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.param_leaf(id, self.store.value(id).clone());
        self.leaves.insert(id, v);
        v
    }

    pub(crate) fn push_update(&mut self, u: StatUpdate) {
        self.updates.push(u);
    }

    pub fn into_updates(self) -> Vec<StatUpdate> {
        self.updates
    }
}
