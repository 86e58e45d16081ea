//! Named parameter storage and tape binding.

use super::tape::{Gradients, Tape, Var};
use crate::rng::Stream;
use crate::scalar::{Scalar, Tensor};
use ndarray::IxDyn;
use std::collections::BTreeMap;

/// Ordered collection of named tensors. Iteration order is insertion
/// order, which fixes the optimizer update order and keeps runs
/// bit-reproducible.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Replace an existing parameter's value; shape must be preserved.
    pub fn set(&mut self, name: &str, t: Tensor<F>) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(self.entries[i].1.shape(), t.shape(), "shape change for {name}");
        self.entries[i].1 = t;
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    // ---- initializers ----

    /// He-style normal init scaled by fan-in.
    pub fn init_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, rng: &mut Stream) {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut t = rng.normal_tensor::<F>(&[cout, cin, k, k]);
        t.mapv_inplace(|v| v * F::of(std));
        self.insert(name.to_string(), t);
        self.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
    }

    pub fn init_linear(&mut self, name: &str, din: usize, dout: usize, rng: &mut Stream) {
        let std = (1.0 / din as f64).sqrt();
        let mut t = rng.normal_tensor::<F>(&[din, dout]);
        t.mapv_inplace(|v| v * F::of(std));
        self.insert(name.to_string(), t);
        self.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[dout])));
    }

    /// Linear layer initialized to zero (used for final output projections
    /// so residual branches start as identity).
    pub fn init_linear_zero(&mut self, name: &str, din: usize, dout: usize) {
        self.insert(name.to_string(), Tensor::zeros(IxDyn(&[din, dout])));
        self.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[dout])));
    }

    pub fn init_conv_zero(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.insert(name.to_string(), Tensor::zeros(IxDyn(&[cout, cin, k, k])));
        self.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
    }

    pub fn init_norm(&mut self, name: &str, c: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(IxDyn(&[c])));
        self.insert(format!("{name}.beta"), Tensor::zeros(IxDyn(&[c])));
    }
}

/// Parameters mounted on a tape for one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn new<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore<F>) -> Self {
        let mut vars = Vec::with_capacity(store.len());
        let mut index = BTreeMap::new();
        for (i, (name, t)) in store.entries.iter().enumerate() {
            vars.push(tape.leaf(t.clone()));
            index.insert(name.clone(), i);
        }
        Bound { vars, index }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no bound parameter {name}"));
        self.vars[i]
    }

    /// Gradients in store order (None where a parameter was unused).
    pub fn grads<F: Scalar>(&self, grads: &Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}
