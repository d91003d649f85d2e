//! Named parameter storage shared by blocks and the model.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, BN_EPS};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running statistic, updated by forward passes in training mode.
    RunningStat,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Element count of trainable tensors whose name starts with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.trainable_ids()
            .filter(|&id| self.entries[id.0].name.starts_with(prefix))
            .map(|id| self.get(id).numel())
            .sum()
    }

    /// One graph leaf per entry: trainable tensors track gradients, running
    /// statistics are constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var<T>> {
        self.entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), e.kind == ParamKind::Trainable))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Handles of one convolution's tensors.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

/// Handles of one batch-norm layer's tensors.
#[derive(Clone, Copy, Debug)]
pub struct BnSpec {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

/// Allocates named, initialized parameters.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> ParamBuilder<'_, T> {
    /// He (fan-in) normal kernel `(cout, cin / groups, k, k)`; zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeometry, bias: bool) -> Result<ConvSpec> {
        let cin_g = cin / geom.groups;
        let std = (2.0 / (cin_g * k * k) as f64).sqrt();
        let w = self.rng.normal_tensor(&[cout, cin_g, k, k], std)?;
        let weight = self.store.insert(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout])?, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(ConvSpec { weight, bias, geom })
    }

    /// gamma 1, beta 0, running statistics (0, 1).
    pub fn bn(&mut self, name: &str, channels: usize) -> Result<BnSpec> {
        let s = &mut self.store;
        Ok(BnSpec {
            gamma: s.insert(format!("{name}.gamma"), Tensor::ones(vec![channels])?, ParamKind::Trainable)?,
            beta: s.insert(format!("{name}.beta"), Tensor::zeros(vec![channels])?, ParamKind::Trainable)?,
            running_mean: s.insert(format!("{name}.running_mean"), Tensor::zeros(vec![channels])?, ParamKind::RunningStat)?,
            running_var: s.insert(format!("{name}.running_var"), Tensor::ones(vec![channels])?, ParamKind::RunningStat)?,
            eps: BN_EPS,
        })
    }
}
