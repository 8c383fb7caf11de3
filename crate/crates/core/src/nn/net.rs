//! Convenience wrapper that wires a `Graph` to a `ParamStore`: parameters
//! are bound by name on first use and cached, so a name used by several
//! submodels points at a single graph node.

use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use super::NnError;

pub struct ModelGraph<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> ModelGraph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        ModelGraph { graph: Graph::new(), store, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Bind (or look up) the named parameter as a graph node.
    pub fn param(&mut self, name: &str) -> Result<Var, NnError> {
        if let Some(&var) = self.bound.get(name) {
            return Ok(var);
        }
        let var = self.graph.param(name, self.store.get(name)?);
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// `x · Wᵀ (+ b)` for the layer stored under `prefix.weight` /
    /// `prefix.bias`; the bias is applied only if the store has one.
    pub fn linear_layer(&mut self, x: Var, prefix: &str) -> Result<Var, NnError> {
        let weight = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let bias = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        super::layers::linear(&mut self.graph, x, weight, bias)
    }
}
