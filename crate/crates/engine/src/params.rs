//! Named parameter storage and the per-forward binding of parameters to
//! graph leaves.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use crate::error::{EngineError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Ordered map from parameter name to value. Iteration order is the
/// lexicographic name order, which keeps updates and serialization
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Plain gradient descent: `p <- p - lr * g` for every parameter present
    /// in `grads`.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor<F>>, lr: F) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| EngineError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(EngineError::shape(
                    "sgd_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv = *pv - lr * gv;
            }
        }
        Ok(())
    }
}

/// A [`Graph`] plus lazily bound parameters. Each parameter becomes one
/// gradient-carrying leaf the first time it is requested.
pub struct Tape<'p, F> {
    graph: Graph<F>,
    store: &'p ParamStore<F>,
    bound: BTreeMap<String, Var>,
    frozen: bool,
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new(), frozen: false }
    }

    /// Binds parameters as constants; nothing will receive a gradient.
    pub fn frozen(store: &'p ParamStore<F>) -> Self {
        Self { frozen: true, ..Self::new(store) }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))?
            .clone();
        let v = if self.frozen { self.graph.constant(value)? } else { self.graph.variable(value)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter. Parameters that were bound but
    /// did not influence the loss get an all-zero gradient.
    pub fn param_gradients(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn into_graph(self) -> Graph<F> {
        self.graph
    }
}

impl<F> Deref for Tape<'_, F> {
    type Target = Graph<F>;

    fn deref(&self) -> &Graph<F> {
        &self.graph
    }
}

impl<F> DerefMut for Tape<'_, F> {
    fn deref_mut(&mut self) -> &mut Graph<F> {
        &mut self.graph
    }
}
