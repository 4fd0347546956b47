//! Named trainable parameters.

use std::collections::BTreeMap;

use rand::Rng;

use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub requires_grad: bool,
}

/// Ordered, name-unique collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, requires_grad: true });
    }

    pub fn get(&self, name: &str) -> &Parameter<S> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.params[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter<S> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.params[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Fan-in-scaled uniform init (He-style) for linear/conv weights: all
/// hidden activations are ReLU. Draws happen in f64 so the stream is
/// identical across scalar types.
pub fn init_fan_in<S: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_c(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data)
}
