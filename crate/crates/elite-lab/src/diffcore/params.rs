//! Named parameter registry shared by all models.
//!
//! Modules register tensors once and keep lightweight [`ParamRef`] handles.
//! Training stages select subsets by name prefix, so freezing a component
//! is just a matter of not listing its prefix.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::diffcore::tensor::{Scalar, Tensor};

/// Stable handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamRef(pub(crate) usize);

impl ParamRef {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters.
///
/// Registration order is part of the public behavior: checkpoints and
/// optimizer sweeps walk parameters in this order, which keeps every run
/// byte-reproducible.
#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Registers a tensor under a unique dotted name.
    pub fn register(&mut self, name: &str, tensor: Tensor<S>) -> Result<ParamRef> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let idx = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamRef(idx))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn get(&self, r: ParamRef) -> &Tensor<S> {
        &self.tensors[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor<S> {
        &mut self.tensors[r.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamRef> {
        self.by_name.get(name).copied().map(ParamRef)
    }

    /// All handles in registration order.
    pub fn all_refs(&self) -> Vec<ParamRef> {
        (0..self.tensors.len()).map(ParamRef).collect()
    }

    /// Handles whose names start with any of the given prefixes, in
    /// registration order.
    pub fn refs_with_prefixes(&self, prefixes: &[&str]) -> Vec<ParamRef> {
        (0..self.tensors.len())
            .filter(|&i| prefixes.iter().any(|p| self.names[i].starts_with(p)))
            .map(ParamRef)
            .collect()
    }

    /// Handles whose names satisfy a predicate, in registration order.
    pub fn refs_matching(&self, pred: impl Fn(&str) -> bool) -> Vec<ParamRef> {
        (0..self.tensors.len()).filter(|&i| pred(&self.names[i])).map(ParamRef).collect()
    }

    /// Clears gradient slots on every parameter.
    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Snapshot of raw values, for bitwise comparisons in tests.
    pub fn snapshot(&self) -> Vec<(String, Vec<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect()
    }

    /// Converts the whole set to another scalar type, keeping names/order.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.register(n, t.cast()).expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_rejects_duplicates_and_prefix_select_keeps_order() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.register("enc.w", Tensor::zeros(vec![2])).unwrap();
        ps.register("dec.w", Tensor::zeros(vec![2])).unwrap();
        let c = ps.register("enc.b", Tensor::zeros(vec![2])).unwrap();
        assert!(ps.register("enc.w", Tensor::zeros(vec![2])).is_err());
        assert_eq!(ps.refs_with_prefixes(&["enc."]), vec![a, c]);
        assert_eq!(ps.name(a), "enc.w");
    }
}
