use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named learnable tensors in a fixed registration order.
///
/// Names are stable across runs (`enc.3.mha.h2.wq`) and are what checkpoints
/// and fine-tuning match on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn register(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    /// Adds a named tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(self.register(name, tensor))
    }

    /// Matrix initialised uniformly in `+-sqrt(1 / rows)`.
    pub(crate) fn matrix(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (1.0 / rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::raw(vec![rows, cols], data))
    }

    /// Bias vector initialised like the weights that feed it.
    pub(crate) fn bias(&mut self, name: String, len: usize, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::raw(vec![len], data))
    }

    pub(crate) fn constant_vector(&mut self, name: String, len: usize, value: f64) -> ParamId {
        self.register(name, Tensor::full(&[len], value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    /// Overwrites the values of `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Places every parameter on `tape`; those for which `trainable` holds
    /// are tracked for gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    tape.variable(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Adds the gradients reaching each bound parameter into its buffer.
    pub fn accumulate_grads(&mut self, binding: &Binding, grads: &Gradients) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            grads.accumulate_into(v, &mut p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Drops the gradient buffers.
    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }
}

/// Tape handles for one [`ModelParams`] placement.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
