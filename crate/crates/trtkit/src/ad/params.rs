use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Named weight tensors with stable iteration order. Checkpoints,
/// optimizers, and gradient checks all address parameters by name.
#[derive(Clone, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), t.shape(), "shape change for {name}");
        *slot = t;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn merge(&mut self, other: ParameterSet) {
        for (k, v) in other.entries {
            self.insert(k, v);
        }
    }
}

/// Parameters bound onto a tape as leaves for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParameterSet) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone()));
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradient per parameter name; zeros for parameters the loss never
    /// reached.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let shape = tape.value(v).shape().to_vec();
                (name.clone(), grads.get_or_zeros(v, &shape))
            })
            .collect()
    }

    /// Names whose gradient is entirely zero or missing (connectivity check).
    pub fn zero_grad_names(&self, tape: &Tape, grads: &Gradients) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, &v)| match grads.get(v) {
                None => true,
                Some(g) => g.data().iter().all(|&x| x == 0.0),
            })
            .map(|(n, _)| {
                let _ = tape;
                n.clone()
            })
            .collect()
    }
}
