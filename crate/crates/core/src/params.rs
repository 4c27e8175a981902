//! Named parameter storage and the per-forward binding of parameters onto a
//! [`Graph`].

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered collection of named weight tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::shape("set parameter", self.tensors[id.0].shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Normal samples with standard deviation `std`, redrawn until they fall
/// inside `±2·std`.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Standard deviation used for every projection matrix.
pub const INIT_STD: f64 = 0.02;

/// A graph plus the parameters bound into it for one forward pass.
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// With `trainable`, bound parameters are differentiable leaves.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The graph node of a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    /// Gradients aligned with the store; parameters that were never bound or
    /// do not reach the loss get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
