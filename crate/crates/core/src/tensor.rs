//! Dense 64-bit float tensors with optional gradient buffers.
//!
//! A [`Tensor`] is a cheaply clonable handle to shared storage. Values are
//! immutable during a forward pass; only the gradient buffer (and explicit
//! parameter updates between steps) mutate the storage. All shapes are
//! row-major.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct TensorStorage {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
}

/// Handle to a dense f64 tensor (rank 0, 1 or 2 in practice; rank 3 traces
/// are stored as lists of matrices by the attention module).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) storage: Rc<RefCell<TensorStorage>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.storage.borrow();
        f.debug_struct("Tensor")
            .field("shape", &s.shape)
            .field("requires_grad", &s.requires_grad)
            .field("values", &s.values)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel_of(&shape) != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, numel_of(&shape), values.len()),
            ));
        }
        Ok(Tensor {
            storage: Rc::new(RefCell::new(TensorStorage {
                shape,
                values,
                grad: None,
                requires_grad,
            })),
        })
    }

    /// Constant (non-tracked) tensor from explicit values.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), values, false)
    }

    /// Trainable tensor: participates in backward and receives gradients.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), values, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel_of(shape)], false).expect("consistent shape")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(Vec::new(), vec![value], false).expect("consistent shape")
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor::new(shape, values, requires_grad).expect("op produced consistent shape")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.storage.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.storage.borrow().shape.len()
    }

    /// Size of dimension `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.storage.borrow().shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.storage.borrow().values.len()
    }

    /// Copy of the values, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.storage.borrow().values.clone()
    }

    pub fn value_at(&self, flat_index: usize) -> f64 {
        self.storage.borrow().values[flat_index]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let s = self.storage.borrow();
        debug_assert_eq!(s.values.len(), 1, "item() on non-scalar tensor");
        s.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.storage.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.storage.borrow_mut().requires_grad = requires_grad;
    }

    /// Copy of the gradient buffer, if populated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.storage.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.storage.borrow_mut().grad = None;
    }

    /// Accumulate `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut s = self.storage.borrow_mut();
        debug_assert_eq!(s.values.len(), delta.len());
        match s.grad {
            Some(ref mut g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => s.grad = Some(delta.to_vec()),
        }
    }

    /// Overwrite all values in place. Length must match; used by the
    /// optimizer and the finite-difference harness, never by forward ops.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut s = self.storage.borrow_mut();
        if s.values.len() != values.len() {
            return Err(Error::shape(
                "set_values",
                format!("have {} values, got {}", s.values.len(), values.len()),
            ));
        }
        s.values.copy_from_slice(values);
        Ok(())
    }

    /// Add `delta` to one element in place (finite-difference probing).
    pub fn nudge(&self, flat_index: usize, delta: f64) {
        self.storage.borrow_mut().values[flat_index] += delta;
    }

    /// Identity of the underlying storage; two handles to the same tensor
    /// compare equal.
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.storage) as usize
    }

    /// True if every value is finite.
    pub fn all_finite(&self) -> bool {
        self.storage.borrow().values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.storage.borrow().shape == other.storage.borrow().shape
    }
}
