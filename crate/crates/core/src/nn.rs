//! Parameter storage, initialization, and the SGD optimizer.

use std::collections::HashMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable and subject to weight decay.
    Weight,
    /// Trainable, no weight decay (biases, normalization affine terms, gate state).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered, named collection of arrays owned by one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, named: &HashMap<String, Tensor>) -> Result<()> {
        for entry in &mut self.entries {
            let Some(v) = named.get(&entry.name) else {
                return Err(Error::Checkpoint(format!("missing tensor `{}`", entry.name)));
            };
            if v.shape() != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    v.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = v.clone();
        }
        Ok(())
    }

    /// Puts every entry on the tape: trainable entries as leaves, buffers as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Buffer => tape.constant(e.value.clone()),
                _ => tape.leaf(e.value.clone()),
            })
            .collect();
        Bindings { vars }
    }

    /// Exponential moving update of running statistics.
    pub fn update_running(&mut self, observations: &[BnObservation], momentum: f64) {
        for obs in observations {
            let rm = self.get_mut(obs.running_mean);
            rm.zip_mut_with(&obs.stats.mean, |r, &m| *r = (1.0 - momentum) * *r + momentum * m);
            let rv = self.get_mut(obs.running_var);
            rv.zip_mut_with(&obs.stats.var, |r, &v| *r = (1.0 - momentum) * *r + momentum * v);
        }
    }
}

/// Tape variables for every entry of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// He-normal initialization for a weight with the given fan-in.
pub fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub fn filled(shape: &[usize], v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(shape), v)
}

/// Ids of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNormIds {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        BatchNormIds {
            gamma: store.add(format!("{prefix}.gamma"), filled(&[channels], 1.0), ParamKind::NoDecay),
            beta: store.add(format!("{prefix}.beta"), zeros(&[channels]), ParamKind::NoDecay),
            running_mean: store.add(format!("{prefix}.running_mean"), zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{prefix}.running_var"), filled(&[channels], 1.0), ParamKind::Buffer),
        }
    }
}

/// Statistics seen by one training-mode normalization, waiting to be folded
/// into the running estimates.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; observations are recorded.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Applies a normalization layer, recording batch statistics in training mode.
pub fn batch_norm(
    tape: &mut Tape,
    store: &ParamStore,
    binds: &Bindings,
    ids: BatchNormIds,
    x: Var,
    mode: NormMode,
    observations: &mut Vec<BnObservation>,
) -> Var {
    let gamma = binds.var(ids.gamma);
    let beta = binds.var(ids.beta);
    match mode {
        NormMode::Eval => {
            let rm: Array1<f64> = store.get(ids.running_mean).iter().copied().collect();
            let rv: Array1<f64> = store.get(ids.running_var).iter().copied().collect();
            tape.batch_norm(x, gamma, beta, Some((&rm, &rv)), BN_EPS).0
        }
        NormMode::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, None, BN_EPS);
            observations.push(BnObservation {
                running_mean: ids.running_mean,
                running_var: ids.running_var,
                stats: stats.expect("training-mode normalization returns statistics"),
            });
            y
        }
    }
}

/// SGD with momentum and L2 weight decay (PyTorch semantics).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, binds: &Bindings, grads: &Gradients, lr: f64) {
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        for (i, entry) in store.entries.iter_mut().enumerate() {
            if entry.kind == ParamKind::Buffer {
                continue;
            }
            let Some(g) = grads.get(binds.vars[i]) else {
                continue;
            };
            let mut d = g.clone();
            if entry.kind == ParamKind::Weight && self.weight_decay > 0.0 {
                d.scaled_add(self.weight_decay, &entry.value);
            }
            let v = match &mut self.velocity[i] {
                Some(v) => {
                    v.mapv_inplace(|x| x * self.momentum);
                    *v += &d;
                    v
                }
                slot @ None => slot.insert(d),
            };
            entry.value.scaled_add(-lr, v);
        }
    }
}
