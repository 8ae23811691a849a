//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] owns its data as one contiguous buffer. Differentiable
//! computation runs through a [`Tape`]: operators append nodes holding
//! the forward value and enough saved context to replay the chain rule
//! in reverse. Gradients accumulate additively, so calling
//! [`Tape::backward`] twice without clearing doubles every leaf
//! gradient.
//!
//! Every operator validates shapes up front and scans its output for
//! non-finite values; a NaN or infinity anywhere is an error naming the
//! operator that produced it, never a silent poison value.

mod tape;

pub mod gradcheck;

pub use tape::{BatchNormOut, Tape, TraceEntry};

use crate::{Error, Result, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    tape_id: Option<TensorId>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and matching data buffer.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    /// Marks the tensor as a differentiation leaf and allocates its
    /// gradient buffer.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient accumulated into this leaf, if any.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the leaf gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Handle assigned by the tape this tensor was last registered on.
    pub fn tape_id(&self) -> Option<TensorId> {
        self.tape_id
    }

    pub(crate) fn set_tape_id(&mut self, id: TensorId) {
        self.tape_id = Some(id);
    }

    /// Casts every element, e.g. to run an f32 copy of an f64 model.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
            tape_id: None,
        }
    }
}

/// Integer class-index mask for segmentation labels, `[H, W]` per image
/// or `[N, H, W]` per batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "class_mask",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(ClassMask { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ClassMask { shape: shape.to_vec(), data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Largest class index present.
    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Stacks per-image `[H, W]` masks into one `[N, H, W]` batch mask.
    pub fn stack(masks: &[&ClassMask]) -> Result<ClassMask> {
        let first = masks
            .first()
            .ok_or_else(|| Error::argument("class_mask", "cannot stack zero masks"))?;
        let mut data = Vec::with_capacity(first.numel() * masks.len());
        for m in masks {
            if m.shape != first.shape {
                return Err(Error::shape(
                    "class_mask",
                    format!("stack of {:?} and {:?}", first.shape, m.shape),
                ));
            }
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![masks.len()];
        shape.extend_from_slice(&first.shape);
        ClassMask::new(&shape, data)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
