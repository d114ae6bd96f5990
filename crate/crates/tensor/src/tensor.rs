use std::cell::Cell;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::element::Element;
use crate::error::{contract_err, dim_err, Result};

/// Gradient callback of a recorded op.
///
/// Receives the gradient w.r.t. the op's output and a mask of which inputs
/// need a gradient; returns one entry per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Element> {
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Inner<T: Element> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Mutex<Option<Vec<T>>>,
    pub(crate) node: Option<Node<T>>,
}

/// Immutable dense row-major tensor; cloning is cheap (shared storage).
pub struct Tensor<T: Element> {
    pub(crate) inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.inner.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording any autodiff graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let prev = NO_GRAD.with(|c| c.replace(true));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub(crate) fn from_inner(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            inner: Arc::new(Inner { shape, data, requires_grad, grad: Mutex::new(None), node }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err("new", format!("zero-sized dimension in {shape:?}"));
        }
        if numel_of(shape) != data.len() {
            return dim_err(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            );
        }
        Ok(Self::from_inner(shape.to_vec(), data, false, None))
    }

    /// Gradient-tracked leaf.
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::from_inner(t.inner.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_inner(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_inner(vec![1], vec![value], false, None)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::from_inner(shape.to_vec(), data, false, None)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self::from_inner(shape.to_vec(), data, false, None)
    }

    /// Record the result of a custom op.
    ///
    /// The graph node is only kept when gradient recording is enabled and at
    /// least one input requires a gradient.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        assert_eq!(numel_of(&shape), data.len(), "op produced inconsistent shape");
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::from_inner(shape, data, true, Some(Node { inputs, backward }))
        } else {
            Self::from_inner(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return contract_err("item", format!("tensor of shape {:?} is not scalar", self.shape()));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_inner(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Copy into a gradient-tracked leaf.
    pub fn to_leaf(&self) -> Self {
        Self::from_inner(self.inner.shape.clone(), self.to_vec(), true, None)
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Elementwise conversion to another precision (constant result).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect();
        Tensor::from_inner(self.inner.shape.clone(), data, false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_element_count() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let a = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let b = no_grad(|| a.mul(&a).unwrap());
        assert!(!b.requires_grad());
        assert!(grad_enabled());
        let c = a.mul(&a).unwrap();
        assert!(c.requires_grad());
    }
}
