//! Named parameter storage and the per-forward binding of parameters onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::nn::{batch_norm2d, BnMode, RunningStats};
use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Model state that is not optimized, e.g. batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(
                "param_store",
                format!(
                    "{} has shape {:?}, replacement has {:?}",
                    entry.name,
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.cast()))
            .collect()
    }

    /// Overwrites every parameter from `named`; all names must be present with matching shapes.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<f32>> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for entry in &mut self.entries {
            let t = lookup.get(entry.name.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks parameter {}", entry.name))
            })?;
            if t.shape() != entry.value.shape() {
                return Err(Error::dim(
                    "load_named",
                    format!(
                        "{}: checkpoint shape {:?}, model shape {:?}",
                        entry.name,
                        t.shape(),
                        entry.value.shape()
                    ),
                ));
            }
            entry.value = t.cast();
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] onto a [`Tape`] for one forward pass.
///
/// Each parameter becomes one tape leaf the first time it is used. Batchnorm running-stat
/// updates produced in train mode are collected rather than applied, so the forward pass
/// never mutates the store.
pub struct Ctx<'t, 's, T> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: BnMode,
    track_grads: bool,
    bound: RefCell<HashMap<ParamId, Var<'t, T>>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    /// Training context: batch statistics, gradients tracked for trainable parameters.
    pub fn train(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(tape, store, BnMode::Train, true)
    }

    /// Inference context: running statistics, nothing differentiable.
    pub fn eval(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(tape, store, BnMode::Eval, false)
    }

    pub fn new(
        tape: &'t Tape<T>,
        store: &'s ParamStore<T>,
        mode: BnMode,
        track_grads: bool,
    ) -> Self {
        Self {
            tape,
            store,
            mode,
            track_grads,
            bound: RefCell::default(),
            updates: RefCell::default(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        *self.bound.borrow_mut().entry(id).or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.track_grads && self.store.kind(id) == ParamKind::Trainable {
                self.tape.variable(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    pub fn batch_norm(
        &self,
        x: Var<'t, T>,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var<'t, T>> {
        let running = RunningStats {
            mean: self.store.get(running_mean).clone(),
            var: self.store.get(running_var).clone(),
        };
        let (y, updated) =
            batch_norm2d(x, self.param(gamma), self.param(beta), &running, self.mode)?;
        if let Some(stats) = updated {
            let mut updates = self.updates.borrow_mut();
            updates.push((running_mean, stats.mean));
            updates.push((running_var, stats.var));
        }
        Ok(y)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .filter(|(id, _)| self.store.kind(**id) == ParamKind::Trainable)
            .map(|(&id, &v)| (id, grads.wrt(v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Running-stat values produced during the forward pass, in the order they were computed.
    pub fn take_running_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}
