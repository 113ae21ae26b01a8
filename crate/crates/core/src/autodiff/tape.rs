use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::var::{self, Var};
use super::AutodiffError;

/// Named parameter values, ordered by name.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Registry of trainable leaves plus their gradient accumulators.
///
/// Parameters are registered once; every forward pass calls [`Tape::var`]
/// to obtain the leaf for a name. After [`Tape::backward`] the accumulated
/// gradients are read with [`Tape::grad`] and cleared with [`Tape::reset`].
pub struct Tape {
    leaves: BTreeMap<String, Var>,
    grads: BTreeMap<String, Tensor>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { leaves: BTreeMap::new(), grads: BTreeMap::new(), consumed: false }
    }

    pub fn from_store(store: &ParamStore) -> Tape {
        let mut tape = Tape::new();
        for (name, value) in store {
            tape.register(name, value.clone()).expect("store keys are unique");
        }
        tape
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<Var, AutodiffError> {
        if self.leaves.contains_key(name) {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        let leaf = Var::parameter(name, value.clone());
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.leaves.insert(name.to_string(), leaf.clone());
        Ok(leaf)
    }

    pub fn var(&self, name: &str) -> Result<Var, AutodiffError> {
        self.leaves.get(name).cloned().ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.leaves.get(name).map(Var::value)
    }

    /// Replace a parameter's value. Graphs built before the call keep the old leaf.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let old = self.leaves.get(name).ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        if old.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch { op: "set_value", left: old.shape(), right: value.shape() });
        }
        self.leaves.insert(name.to_string(), Var::parameter(name, value));
        Ok(())
    }

    pub fn store(&self) -> ParamStore {
        self.leaves.iter().map(|(k, v)| (k.clone(), v.value().clone())).collect()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor> {
        &self.grads
    }

    /// Accumulate d`loss`/dθ into the gradient slots.
    pub fn backward(&mut self, loss: &Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let grads = &mut self.grads;
        let mut unknown = None;
        var::backward(loss, |name, g| match grads.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => unknown = Some(name.to_string()),
        })?;
        if let Some(name) = unknown {
            return Err(AutodiffError::UnknownParameter(name));
        }
        self.consumed = true;
        Ok(())
    }

    /// Zero all accumulators and allow another backward pass.
    pub fn reset(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.consumed = false;
    }

    /// Allow another backward pass that adds to the current accumulators.
    pub fn rearm(&mut self) {
        self.consumed = false;
    }
}
