use std::collections::HashSet;
use std::sync::{Arc, RwLock};

use crate::element::Element;
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Named trainable tensor. Cloning shares the same underlying slot.
pub struct Param<T: Element> {
    inner: Arc<ParamInner<T>>,
}

struct ParamInner<T: Element> {
    name: String,
    value: RwLock<Tensor<T>>,
}

impl<T: Element> Clone for Param<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Element> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param").field("name", &self.inner.name).field("shape", &self.shape()).finish()
    }
}

impl<T: Element> Param<T> {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// The current value as a gradient-tracked leaf.
    pub fn tensor(&self) -> Tensor<T> {
        self.inner.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor().numel()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor().grad()
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }

    /// Replace the value (same shape); the new leaf starts without a gradient.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        let t = Tensor::leaf(&shape, data)?;
        *self.inner.value.write().expect("param lock") = t;
        Ok(())
    }
}

/// Named non-trainable state (e.g. running statistics).
pub struct Buffer<T: Element> {
    inner: Arc<BufferInner<T>>,
}

struct BufferInner<T> {
    name: String,
    shape: Vec<usize>,
    values: RwLock<Vec<T>>,
}

impl<T: Element> std::fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Buffer").field("name", &self.inner.name).field("shape", &self.inner.shape).finish()
    }
}

impl<T: Element> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Element> Buffer<T> {
    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn get(&self) -> Vec<T> {
        self.inner.values.read().expect("buffer lock").clone()
    }

    pub fn set(&self, values: Vec<T>) -> Result<()> {
        if values.len() != self.inner.values.read().expect("buffer lock").len() {
            return dim_err("buffer", format!("length mismatch for {}", self.inner.name));
        }
        *self.inner.values.write().expect("buffer lock") = values;
        Ok(())
    }
}

/// Registry holding every parameter and buffer of a model exactly once,
/// in creation order.
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashSet<String>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: HashSet::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if !self.names.insert(name.to_string()) {
            return contract_err("param_store", format!("duplicate name {name}"));
        }
        Ok(())
    }

    /// Register `init` (any tensor) as a trainable parameter named `name`.
    pub fn create(&mut self, name: &str, init: Tensor<T>) -> Result<Param<T>> {
        self.claim(name)?;
        let p = Param {
            inner: Arc::new(ParamInner { name: name.to_string(), value: RwLock::new(init.to_leaf()) }),
        };
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn create_buffer(&mut self, name: &str, shape: &[usize], init: Vec<T>) -> Result<Buffer<T>> {
        if shape.iter().product::<usize>() != init.len() {
            return dim_err("param_store", format!("buffer {name} shape {shape:?} vs {} values", init.len()));
        }
        self.claim(name)?;
        let b = Buffer {
            inner: Arc::new(BufferInner { name: name.to_string(), shape: shape.to_vec(), values: RwLock::new(init) }),
        };
        self.buffers.push(b.clone());
        Ok(b)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn get_buffer(&self, name: &str) -> Option<&Buffer<T>> {
        self.buffers.iter().find(|b| b.name() == name)
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.zero_grad());
    }
}
