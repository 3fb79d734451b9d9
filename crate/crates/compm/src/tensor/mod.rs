//! Reverse-mode automatic differentiation over row-major f64 tensors.
//!
//! The engine is deliberately small: exactly the primitives the model needs,
//! recorded on an explicit [`Tape`] and replayed in reverse for gradients.
//! There is no implicit broadcasting except scalar-tensor; shape mismatches
//! are errors, not coercions.

mod tape;

pub mod gradcheck;

pub use tape::Tape;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// A shared handle to an n-dimensional array of f64 values.
///
/// Cloning is cheap (reference count); the underlying buffer is shared.
/// Data is mutable in place (optimizer updates); gradients accumulate
/// additively into `grad` and are reset by the caller.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// Set when this tensor is the output of a tape operation.
    tape_uid: Cell<Option<u64>>,
}

impl Tensor {
    /// Build a tensor from explicit shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "zero extent in tensor shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new(shape.to_vec(), data, false))
    }

    /// A trainable tensor (gradient accumulation enabled).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::from_vec(shape, data)?;
        Ok(Tensor(Rc::new(Inner {
            requires_grad: true,
            ..Rc::try_unwrap(t.0).ok().expect("fresh tensor is unshared")
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new(vec![1], vec![value], false)
    }

    pub(crate) fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            tape_uid: Cell::new(None),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Number of rows when viewed as 2-D (1-D counts as a single row).
    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            1 => 1,
            2 => self.0.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.0.shape.len()),
        }
    }

    /// Number of columns when viewed as 2-D.
    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            1 => self.0.shape[0],
            2 => self.0.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.0.shape.len()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the underlying buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    pub fn value_at(&self, index: usize) -> f64 {
        self.0.data.borrow()[index]
    }

    /// Run `f` over the borrowed data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    /// Mutate the underlying buffer in place (same length required).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.0.data.borrow_mut())
    }

    /// Replace the buffer contents, keeping the shape.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Accumulated gradient, if any backward pass has touched this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient buffer, treating "never touched" as all zeros.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    pub(crate) fn tape_uid(&self) -> Option<u64> {
        self.0.tape_uid.get()
    }

    pub(crate) fn set_tape_uid(&self, uid: u64) {
        self.0.tape_uid.set(Some(uid));
    }

    /// Strong reference count of the shared buffer (used to observe tape release).
    pub fn handle_count(&self) -> usize {
        Rc::strong_count(&self.0)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

/// Row-major matrix product of raw buffers: a[m×k] · b[k×n].
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
