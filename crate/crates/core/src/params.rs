//! Named trainable parameters and non-trainable buffers (batch-norm running
//! statistics), kept in registration order.

use std::collections::HashMap;

use crate::error::{config_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Summed gradient contributions since the last [`ParamStore::zero_grad`].
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform_in(-bound, bound)))
}

/// Uniform in `±sqrt(3 / fan_in)`, for layers not followed by a ReLU.
pub fn lecun_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform_in(-bound, bound)))
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(config_err(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(config_err(format!("duplicate buffer name `{name}`")));
        }
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        let id = self.id(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(&self.params[id])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        let id = self.id(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(&mut self.params[id])
    }

    pub fn param(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: usize) -> &Tensor<T> {
        &self.buffers[id].value
    }

    pub fn buffer_id(&self, name: &str) -> Option<usize> {
        self.buffer_index.get(name).copied()
    }

    /// Mutable access to two distinct buffers at once.
    pub fn buffer_pair_mut(&mut self, a: usize, b: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a, b, "buffer_pair_mut needs distinct ids");
        if a < b {
            let (lo, hi) = self.buffers.split_at_mut(b);
            (&mut lo[a].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a);
            (&mut hi[0].value, &mut lo[b].value)
        }
    }

    /// Adds `grad` into the accumulator of parameter `id`.
    pub fn accumulate(&mut self, id: usize, grad: &Tensor<T>) {
        self.params[id].grad.add_assign(grad);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }
}
