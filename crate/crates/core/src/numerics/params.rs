use std::collections::BTreeMap;
use std::sync::Arc;

use super::{NumericsError, Tensor};

/// Named trainable tensors and their gradients.
///
/// Names iterate in sorted order, which fixes the checkpoint layout and the
/// order of optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Arc<Tensor>>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericsError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let grad = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()])?;
        self.grads.insert(name.clone(), grad);
        self.params.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(Arc::as_ref)
    }

    pub(crate) fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.params.get(name).cloned()
    }

    /// Mutable access; clones the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, delta: &Tensor) {
        if let Some(g) = self.grads.get_mut(name) {
            g.add_assign(delta);
        }
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Splits into parameter and gradient views for an in-place update.
    pub(crate) fn params_and_grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.params.iter_mut().zip(self.grads.iter()).map(|((name, p), (_, g))| (name.as_str(), Arc::make_mut(p), g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(s.insert("w", Tensor::scalar(2.0)), Err(NumericsError::DuplicateParameter(_))));
    }

    #[test]
    fn gradients_match_parameter_shapes() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(2, 3)).unwrap();
        s.insert("b", Tensor::zeros(1, 4)).unwrap();
        for (name, p) in s.iter() {
            assert_eq!(s.grad(name).unwrap().shape(), p.shape());
        }
    }
}
