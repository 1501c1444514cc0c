//! Parameterized layers on top of the differentiation engine.
//!
//! Layers do not own tensors. They hold [`ParamId`]s into a [`ParamStore`],
//! and a forward pass runs inside a [`Session`] that lifts each parameter
//! onto the graph the first time it is used.

mod attention;
mod conv;
mod cost;
mod dynamic;
mod norm;

pub use attention::{ChannelAttention, SpatialAttention};
pub use conv::{Conv2d, ConvTranspose2d, DepthwiseConv2d, Linear};
pub use cost::CostRow;
pub use dynamic::{Attentions, DynamicConv2d, DynamicConvConfig, KernelAttention};
pub use norm::{BatchNorm2d, LayerNorm2d};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable and subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (biases, norm affine terms).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Flat, ordered collection of named parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f64> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites every value with the matching entry of `other`, checking names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, data) in updates {
            self.params[id.0].value.data_mut().copy_from_slice(&data);
        }
    }
}

/// Builds parameters with deterministic initialization.
pub struct Init<'a, T: Element, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Element, R: Rng> Init<'_, T, R> {
    /// He-normal weights for a layer with the given fan-in.
    pub fn he(&mut self, name: String, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: String, shape: Shape, std: f64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(self.rng);
            T::cast(z * std)
        });
        self.store.add(name, ParamKind::Weight, t)
    }

    pub fn constant(&mut self, name: String, shape: Shape, value: f64, kind: ParamKind) -> ParamId {
        self.store.add(name, kind, Tensor::full(shape, T::cast(value)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-statistic updates, parameter gradients.
    Train,
    /// Running statistics; parameters are constants unless requested.
    Eval,
}

/// One forward pass: a fresh graph plus read access to the parameters.
///
/// Running-statistic updates produced in train mode are collected rather
/// than written, so a store can be shared during evaluation. Apply them with
/// [`ParamStore::apply_updates`] once the session is done.
pub struct Session<'a, T: Element = f64> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    param_grads: bool,
    updates: Vec<(ParamId, Vec<T>)>,
}

impl<'a, T: Element> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            param_grads: mode == Mode::Train,
            updates: Vec::new(),
        }
    }

    /// Continues recording on an existing graph.
    pub fn from_graph(graph: Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            ..Self::new(store, mode)
        }
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    /// Uses `var` in place of the stored value of parameter `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.graph.bind_tag(id.0, var);
    }

    /// Overrides whether parameters are differentiable leaves.
    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.param_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The graph variable for a parameter; the tag is the parameter index.
    pub fn param(&mut self, id: ParamId) -> Var {
        let p = &self.store.params[id.0];
        let grad = self.param_grads && p.kind != ParamKind::Buffer;
        self.graph
            .tagged_leaf(id.0, || p.value.clone().with_requires_grad(grad))
    }

    pub(crate) fn push_update(&mut self, id: ParamId, data: Vec<T>) {
        self.updates.push((id, data));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.updates)
    }
}

/// Converts gradients keyed by graph tag back to parameter ids.
pub fn param_grads<T: Element>(grads: &crate::tensor::Gradients<T>) -> Vec<(ParamId, &Tensor<T>)> {
    grads.tagged().map(|(tag, g)| (ParamId(tag), g)).collect()
}
