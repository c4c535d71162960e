use std::collections::HashMap;

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors with stable (insertion) iteration order and a
/// gradient buffer per parameter.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|p| p.grad.data().iter().all(|&v| v == 0.0))
    }

    /// Same names, same shapes, same order.
    pub fn layout_matches(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Name-to-node resolution for model builders. Implemented by [`ParamNodes`]
/// directly and by [`Scoped`] views that prepend a prefix, which lets two
/// towers share one registered store under `student/...` / `predictor/...`
/// style names.
pub trait NodeLookup {
    fn node(&self, name: &str) -> Result<NodeId>;
}

/// Prefix view over a [`ParamNodes`].
pub struct Scoped<'a> {
    pub inner: &'a ParamNodes,
    pub prefix: &'a str,
}

impl NodeLookup for Scoped<'_> {
    fn node(&self, name: &str) -> Result<NodeId> {
        self.inner.node(&format!("{}{}", self.prefix, name))
    }
}

impl NodeLookup for ParamNodes {
    fn node(&self, name: &str) -> Result<NodeId> {
        ParamNodes::node(self, name)
    }
}

/// Parameters registered into one graph, addressable by name.
pub struct ParamNodes {
    nodes: Vec<(String, NodeId)>,
    index: HashMap<String, usize>,
}

impl ParamNodes {
    /// Register every parameter of `store` into `g`, converting to the graph
    /// scalar type. In a recording graph these become trainable leaves; in an
    /// inference graph they are constants (the stop-gradient boundary).
    pub fn register<S: Scalar>(g: &mut Graph<S>, store: &ParamStore) -> Result<Self> {
        let mut nodes = Vec::with_capacity(store.len());
        let mut index = HashMap::with_capacity(store.len());
        for p in store.iter() {
            let t = p.value.map(|v| S::from_f64(v as f64));
            let id = g.param(&t)?;
            index.insert(p.name.clone(), nodes.len());
            nodes.push((p.name.clone(), id));
        }
        Ok(ParamNodes { nodes, index })
    }

    /// Register a stand-alone f64 copy (gradient checking path).
    pub fn register_f64(g: &mut Graph<f64>, values: &[(String, Tensor<f64>)]) -> Result<Self> {
        let mut nodes = Vec::with_capacity(values.len());
        let mut index = HashMap::with_capacity(values.len());
        for (name, t) in values {
            let id = g.param(t)?;
            index.insert(name.clone(), nodes.len());
            nodes.push((name.clone(), id));
        }
        Ok(ParamNodes { nodes, index })
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.nodes[i].1)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }

    /// Accumulate `scale * grad` from a backward pass into the store's
    /// gradient buffers. Parameters the loss never reached contribute zero.
    pub fn accumulate_grads<S: Scalar>(
        &self,
        grads: &Gradients<S>,
        scale: f32,
        store: &mut ParamStore,
    ) -> Result<()> {
        for (name, id) in &self.nodes {
            if let Some(g) = grads.get(*id) {
                let p = store
                    .get_mut(name)
                    .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
                if g.len() != p.grad.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "accumulate_grads",
                        details: format!("{name}: {} vs {}", g.len(), p.grad.numel()),
                    });
                }
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.iter()) {
                    *dst += scale * src.to_f64() as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![1, 1])).is_err());
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut s = ParamStore::new();
        s.add("b", Tensor::zeros(vec![1, 1])).unwrap();
        s.add("a", Tensor::zeros(vec![1, 1])).unwrap();
        let names: Vec<_> = s.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
    }
}
