//! Named parameter storage and per-graph binding.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform(usize),
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..numel)
                    .map(|_| loop {
                        let x: f64 = normal.sample(rng);
                        if x.abs() <= 2.0 * std {
                            break T::from_f(x);
                        }
                    })
                    .collect()
            }
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..numel)
                    .map(|_| T::from_f(rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        let mut t = Tensor::from_vec(shape, data).expect("valid parameter shape");
        t.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(t);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values by name; every stored name must be present with a matching shape.
    pub fn load_values(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Adds the gradients recorded on `graph` for `bindings` into the accumulators.
    pub fn accumulate(&mut self, bindings: &[(ParamId, Var<'_, T>)]) {
        for (id, var) in bindings {
            var.accumulate_grad_into(&mut self.tensors[id.0]);
        }
    }
}

/// Lazily places parameters onto a graph, once each.
pub struct Binder<'g, 'p, T: Real> {
    graph: &'g Graph<T>,
    store: &'p ParamStore<T>,
    train: bool,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, 'p, T: Real> Binder<'g, 'p, T> {
    /// With `train == false` every parameter enters as a constant.
    pub fn new(graph: &'g Graph<T>, store: &'p ParamStore<T>, train: bool) -> Self {
        Binder {
            graph,
            store,
            train,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Uses caller-supplied nodes, one per parameter in store order.
    pub fn from_vars(graph: &'g Graph<T>, store: &'p ParamStore<T>, vars: &[Var<'g, T>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} nodes supplied for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Binder {
            graph,
            store,
            train: true,
            bound: RefCell::new(vars.iter().copied().map(Some).collect()),
        })
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.train && !self.store.is_frozen(id) {
            self.graph.variable(t.clone())
        } else {
            self.graph.constant(t.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Bound trainable parameters, for [`ParamStore::accumulate`].
    pub fn into_bindings(self) -> Vec<(ParamId, Var<'g, T>)> {
        self.bound
            .into_inner()
            .into_iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.requires_grad()).map(|v| (ParamId(i), v)))
            .collect()
    }
}
